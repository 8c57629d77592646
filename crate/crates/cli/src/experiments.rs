//! Experiment runners. Each returns its CSV files and a report in memory;
//! [`crate::write_outputs`] puts them on disk.

use std::time::Instant;

use sfuq_core::models::pitchfork_root_is_stable;
use sfuq_core::rng::derive_seed;
use sfuq_core::twobsde::ApproximatorSpec;
use sfuq_core::{
    coupled_terminal_error, make_triad_qoi_problem, pitchfork_limit_vector_field, pitchfork_roots,
    reduce_lq, riccati_value, sigma_star_field, solve_2bsde, solve_ghjb, solve_ghjb_richardson,
    strong_error_rate, worst_case_expectation, CoupledFamily, GhjbProblem, GridSpec, LqFamily,
    PitchforkFamily, RiccatiProblem, SimConfig, ThetaGrid, TriadSystem, UncertaintyInterval,
    ValueField,
};

use crate::config::{
    ExperimentConfig, ExperimentKind, FdConfig, LqTableConfig, PitchforkScanConfig,
    SigmaStarConfig, SigmaStarProblem, StrongRateConfig, TriadCaseConfig, WorstCaseConfig,
};
use crate::output::{Cell, ExperimentReport, OutputFile, ReportEntry, Table};
use crate::CliError;

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub files: Vec<OutputFile>,
    pub report: ExperimentReport,
}

impl ExperimentOutput {
    pub fn file(&self, name: &str) -> Option<&OutputFile> {
        self.files.iter().find(|f| f.name == name)
    }
}

#[derive(Default)]
struct Collector {
    files: Vec<OutputFile>,
    headline: Vec<ReportEntry>,
    diagnostics: Vec<ReportEntry>,
}

impl Collector {
    fn table(&mut self, t: Table) {
        self.files.push(t.into_file());
    }

    fn head(&mut self, name: impl Into<String>, value: f64, file: &str, column: &str) {
        self.headline
            .push(ReportEntry::new(name, value, file, column));
    }

    fn diag(&mut self, name: impl Into<String>, value: f64, file: &str, column: &str) {
        self.diagnostics
            .push(ReportEntry::new(name, value, file, column));
    }
}

/// Run the configured experiment.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    config.validate()?;
    let start = Instant::now();
    let seed = config.experiment.seed;
    let mut c = Collector::default();
    match config.experiment.kind {
        ExperimentKind::LqTable => lq_table(config.lq_table.as_ref().unwrap(), &mut c)?,
        ExperimentKind::TriadCase => triad_case(config.triad_case.as_ref().unwrap(), seed, &mut c)?,
        ExperimentKind::StrongRate => {
            strong_rate(config.strong_rate.as_ref().unwrap(), seed, &mut c)?
        }
        ExperimentKind::SigmaStar => sigma_star(config.sigma_star.as_ref().unwrap(), &mut c)?,
        ExperimentKind::PitchforkScan => {
            pitchfork_scan(config.pitchfork_scan.as_ref().unwrap(), &mut c)
        }
        ExperimentKind::WorstCase => worst_case(config.worst_case.as_ref().unwrap(), seed, &mut c)?,
    }
    if config.experiment.plot_script {
        c.files.push(OutputFile {
            name: "plot.py".into(),
            bytes: plot_script(config.experiment.kind).into_bytes(),
        });
    }
    let report = ExperimentReport {
        kind: config.experiment.kind,
        seed,
        config: config.to_toml(),
        headline: c.headline,
        diagnostics: c.diagnostics,
        files: c.files.iter().map(|f| f.name.clone()).collect(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutput {
        files: c.files,
        report,
    })
}

fn fd_solve(
    problem: &GhjbProblem,
    theta: &UncertaintyInterval,
    fd: &FdConfig,
    horizon: f64,
    record: &[f64],
) -> sfuq_core::Result<ValueField> {
    let axes = fd
        .axes
        .iter()
        .map(|a| {
            a.axis()
                .map_err(|e| sfuq_core::Error::Config(e.to_string()))
        })
        .collect::<sfuq_core::Result<Vec<_>>>()?;
    let grid = GridSpec::with_stable_dt(axes, horizon, problem, theta, fd.control_margin)?;
    if fd.richardson {
        solve_ghjb_richardson(problem, theta, &grid, record)
    } else {
        solve_ghjb(problem, theta, &grid, record)
    }
}

fn lq_table(cfg: &LqTableConfig, c: &mut Collector) -> Result<(), CliError> {
    const FILE: &str = "lq_table.csv";
    let sigma = UncertaintyInterval::new(cfg.sigma[0], cfg.sigma[1])?;
    let degenerate = sigma.is_degenerate();
    let mut header = vec![
        "epsilon",
        "v_full",
        "v_reduced",
        "delta_v",
        "steps_full",
        "steps_reduced",
    ];
    if degenerate {
        header.extend(["riccati_full", "riccati_reduced", "riccati_delta_v"]);
    }
    let mut table = Table::new(FILE, &header);
    let mut deltas = vec![];
    for &eps in &cfg.epsilons {
        let ctx = format!("lq_table at epsilon = {eps}");
        let model = cfg.model.build(eps, sigma, cfg.horizon)?;
        let reduced = reduce_lq(&model).map_err(|e| CliError::solver(&ctx, e))?;
        let full_problem = GhjbProblem::lq_full(&model).map_err(|e| CliError::solver(&ctx, e))?;
        let red_problem =
            GhjbProblem::lq_reduced(&reduced).map_err(|e| CliError::solver(&ctx, e))?;
        let full = fd_solve(&full_problem, &sigma, &cfg.full_grid, cfg.horizon, &[])
            .map_err(|e| CliError::solver(&ctx, e))?;
        let red = fd_solve(&red_problem, &sigma, &cfg.reduced_grid, cfg.horizon, &[])
            .map_err(|e| CliError::solver(&ctx, e))?;
        let v_full = full.value_at_start(&cfg.x0);
        let v_red = red.value_at_start(&cfg.x0[..1]);
        let delta = (v_full - v_red).abs();
        deltas.push(delta);
        c.head(format!("delta_v[{eps}]"), delta, FILE, "delta_v");
        c.diag(format!("v_full[{eps}]"), v_full, FILE, "v_full");
        c.diag(format!("v_reduced[{eps}]"), v_red, FILE, "v_reduced");
        let mut row: Vec<Cell> = vec![
            eps.into(),
            v_full.into(),
            v_red.into(),
            delta.into(),
            full.grid.n_steps().into(),
            red.grid.n_steps().into(),
        ];
        if degenerate {
            let s = sigma.lo();
            let rf = riccati_value(&RiccatiProblem::lq_full(&model), s, 0.0, &cfg.x0)
                .map_err(|e| CliError::solver(&ctx, e))?;
            let rr = riccati_value(&RiccatiProblem::lq_reduced(&reduced), s, 0.0, &cfg.x0[..1])
                .map_err(|e| CliError::solver(&ctx, e))?;
            let rd = (rf - rr).abs();
            c.diag(
                format!("riccati_delta_v[{eps}]"),
                rd,
                FILE,
                "riccati_delta_v",
            );
            row.extend([rf.into(), rr.into(), rd.into()]);
        }
        table.push(row);
    }
    c.table(table);

    let mut order: Vec<(f64, f64)> = cfg.epsilons.iter().copied().zip(deltas).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let decreasing = order.windows(2).all(|w| w[1].1 < w[0].1);
    let mut summary = Table::new(
        "lq_table_summary.csv",
        &["n_epsilons", "delta_v_decreasing"],
    );
    summary.push(vec![order.len().into(), decreasing.into()]);
    c.table(summary);
    Ok(())
}

fn triad_case(cfg: &TriadCaseConfig, seed: u64, c: &mut Collector) -> Result<(), CliError> {
    const VALUES: &str = "triad_values.csv";
    const SUMMARY: &str = "triad_summary.csv";
    let model = cfg.model()?;
    let approx = ApproximatorSpec::polynomial(cfg.bsde.degree, cfg.bsde.ridge)?;
    let mut solve = |which: TriadSystem, label: &str, x0: Vec<f64>, stream: u64| {
        let ctx = format!("triad_case {label} system");
        let problem = make_triad_qoi_problem(&model, which, cfg.horizon, x0)?
            .with_spread(cfg.bsde.initial_spread);
        let sol = solve_2bsde(
            &problem,
            &approx,
            cfg.bsde.n_steps,
            cfg.bsde.n_samples,
            derive_seed(seed, stream),
        )
        .map_err(|e| CliError::solver(ctx, e))?;
        c.files.push(OutputFile::from_writer(
            &format!("triad_{label}_2bsde.csv"),
            |w| sol.write_report(w),
        )?);
        c.files.push(OutputFile::from_writer(
            &format!("triad_{label}_sigma_star.csv"),
            |w| sol.write_sigma_star(w),
        )?);
        Ok::<_, CliError>(sol)
    };
    let full = solve(TriadSystem::Full, "full", cfg.x0.to_vec(), 0)?;
    let limit = solve(TriadSystem::Limit, "limit", cfg.x0[..2].to_vec(), 1)?;

    let fd_limit = match &cfg.limit_grid {
        Some(fd) => {
            let limit_model = model.limit(model.lambda.midpoint());
            let problem = GhjbProblem::triad_limit_qoi(&limit_model);
            let vf = fd_solve(&problem, &model.lambda.squared(), fd, cfg.horizon, &[])
                .map_err(|e| CliError::solver("triad_case finite-difference limit", e))?;
            Some(vf.value_at_start(&cfg.x0[..2]))
        }
        None => None,
    };

    let mut values = Table::new(
        VALUES,
        &[
            "system",
            "method",
            "value",
            "terminal_mismatch",
            "std_error",
        ],
    );
    values.push(vec![
        "full".into(),
        "2bsde".into(),
        full.y0.into(),
        full.terminal_mismatch.into(),
        full.terminal_std_error.into(),
    ]);
    values.push(vec![
        "limit".into(),
        "2bsde".into(),
        limit.y0.into(),
        limit.terminal_mismatch.into(),
        limit.terminal_std_error.into(),
    ]);
    if let Some(v) = fd_limit {
        values.push(vec![
            "limit".into(),
            "fd".into(),
            v.into(),
            Cell::Empty,
            Cell::Empty,
        ]);
    }
    c.table(values);

    let gap = (full.y0 - limit.y0).abs() / limit.y0.abs();
    let mut summary = Table::new(
        SUMMARY,
        &["v_full", "v_limit", "relative_gap", "v_limit_fd"],
    );
    summary.push(vec![
        full.y0.into(),
        limit.y0.into(),
        gap.into(),
        fd_limit.into(),
    ]);
    c.table(summary);
    c.head("v_full", full.y0, SUMMARY, "v_full");
    c.head("v_limit", limit.y0, SUMMARY, "v_limit");
    c.head("relative_gap", gap, SUMMARY, "relative_gap");
    if let Some(v) = fd_limit {
        c.diag("v_limit_fd", v, SUMMARY, "v_limit_fd");
    }
    c.diag(
        "terminal_mismatch_full",
        full.terminal_mismatch,
        VALUES,
        "terminal_mismatch",
    );
    c.diag(
        "terminal_mismatch_limit",
        limit.terminal_mismatch,
        VALUES,
        "terminal_mismatch",
    );
    Ok(())
}

fn strong_rate(cfg: &StrongRateConfig, seed: u64, c: &mut Collector) -> Result<(), CliError> {
    const FILE: &str = "strong_rate.csv";
    const THETA: &str = "strong_rate_theta.csv";
    let grid = cfg.theta_grid()?;
    let sigma = UncertaintyInterval::new(grid.lo(), grid.hi())?;
    let base = cfg.model.build(cfg.epsilons[0], sigma, cfg.horizon)?;
    let family = LqFamily {
        base,
        dt_factor: cfg.dt_factor,
    };
    let sim = SimConfig::new(cfg.dt, cfg.horizon, cfg.n_paths, seed, cfg.x0.to_vec());
    let report = strong_error_rate(&family, &cfg.epsilons, &sim, &grid)
        .map_err(|e| CliError::solver("strong_rate", e))?;
    c.files
        .push(OutputFile::from_writer(FILE, |w| report.write_csv(w))?);
    let mut per_theta = Table::new(THETA, &["epsilon", "theta", "mean", "std_error"]);
    for (eps, est) in cfg.epsilons.iter().zip(&report.estimates) {
        for m in &est.per_theta_means {
            per_theta.push(vec![
                (*eps).into(),
                m.theta.into(),
                m.mean.into(),
                m.std_error.into(),
            ]);
        }
    }
    c.table(per_theta);
    if let Some(s) = report.fitted_slope {
        c.head("slope", s, FILE, "slope_overall");
    }
    for (eps, err) in cfg.epsilons.iter().zip(&report.errors) {
        c.diag(format!("error[{eps}]"), *err, FILE, "error");
    }
    Ok(())
}

fn sigma_star(cfg: &SigmaStarConfig, c: &mut Collector) -> Result<(), CliError> {
    const FIELD: &str = "sigma_star.csv";
    const SUMMARY: &str = "sigma_star_summary.csv";
    let mut theta = UncertaintyInterval::new(cfg.interval[0], cfg.interval[1])?;
    let problem = match &cfg.problem {
        SigmaStarProblem::Quadratic { curvature } => {
            let k = *curvature;
            GhjbProblem::new(
                1,
                |x, out| out[0] = -x[0],
                |_, out| out[0] = 1.0,
                move |x| k * x[0] * x[0],
            )
        }
        SigmaStarProblem::LqReduced { model, epsilon } => {
            let m = model.build(*epsilon, theta, cfg.horizon)?;
            GhjbProblem::lq_reduced(&reduce_lq(&m)?)?
        }
        SigmaStarProblem::LqFull { model, epsilon } => {
            GhjbProblem::lq_full(&model.build(*epsilon, theta, cfg.horizon)?)?
        }
        SigmaStarProblem::TriadLimit {
            coefficients: [a1, a2, a3],
            gamma,
        } => {
            let limit = sfuq_core::TriadLimit::new(*a1, *a2, *a3, theta.midpoint(), *gamma)?;
            theta = theta.squared();
            GhjbProblem::triad_limit_qoi(&limit)
        }
    };
    let vf = fd_solve(&problem, &theta, &cfg.grid, cfg.horizon, &cfg.times)
        .map_err(|e| CliError::solver("sigma_star", e))?;
    let times: Vec<f64> = vf.slices.iter().map(|s| s.t).collect();
    let field = sigma_star_field(&vf, &theta, &times, |x, g, h| problem.bracket(x, g, h))
        .map_err(|e| CliError::solver("sigma_star", e))?;
    c.files
        .push(OutputFile::from_writer(FIELD, |w| field.write_csv(w))?);
    c.files
        .push(OutputFile::from_writer("value_field.csv", |w| {
            vf.write_csv(w)
        })?);
    let mut summary = Table::new(SUMMARY, &["t", "n_nodes", "n_upper", "n_lower"]);
    let (mut upper, mut lower, mut total) = (0usize, 0usize, 0usize);
    for (t, s) in field.times.iter().zip(&field.sigma_star) {
        let nu = s.iter().filter(|v| **v == theta.hi()).count();
        let nl = s.len() - nu;
        summary.push(vec![(*t).into(), s.len().into(), nu.into(), nl.into()]);
        upper += nu;
        lower += nl;
        total += s.len();
    }
    c.table(summary);
    let mut totals = Table::new(
        "sigma_star_totals.csv",
        &["n_values", "fraction_upper", "fraction_lower"],
    );
    let fu = upper as f64 / total as f64;
    let fl = lower as f64 / total as f64;
    totals.push(vec![total.into(), fu.into(), fl.into()]);
    c.table(totals);
    c.head(
        "fraction_upper",
        fu,
        "sigma_star_totals.csv",
        "fraction_upper",
    );
    c.head(
        "fraction_lower",
        fl,
        "sigma_star_totals.csv",
        "fraction_lower",
    );
    c.diag(
        "v0_at_origin",
        vf.value_at_start(&vec![0.0; vf.grid.dim()]),
        "value_field.csv",
        "value",
    );
    Ok(())
}

fn pitchfork_scan(cfg: &PitchforkScanConfig, c: &mut Collector) {
    const CENSUS: &str = "pitchfork_census.csv";
    let (lo, hi, n) = cfg.r_grid;
    let mut field = Table::new("pitchfork_field.csv", &["theta", "r", "f"]);
    let mut roots = Table::new("pitchfork_roots.csv", &["theta", "root", "stable"]);
    let mut census = Table::new(CENSUS, &["theta", "n_roots", "n_stable"]);
    for &theta in &cfg.thetas {
        for i in 0..n {
            let r = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            field.push(vec![
                theta.into(),
                r.into(),
                pitchfork_limit_vector_field(theta, r).into(),
            ]);
        }
        let rs = pitchfork_roots(theta);
        let mut stable = 0usize;
        for &r in &rs {
            let s = pitchfork_root_is_stable(theta, r);
            stable += s as usize;
            roots.push(vec![theta.into(), r.into(), s.into()]);
        }
        census.push(vec![theta.into(), rs.len().into(), stable.into()]);
        c.head(
            format!("n_roots[{theta}]"),
            rs.len() as f64,
            CENSUS,
            "n_roots",
        );
        c.diag(
            format!("n_stable[{theta}]"),
            stable as f64,
            CENSUS,
            "n_stable",
        );
    }
    c.table(field);
    c.table(roots);
    c.table(census);
}

fn worst_case(cfg: &WorstCaseConfig, seed: u64, c: &mut Collector) -> Result<(), CliError> {
    const FILE: &str = "worst_case.csv";
    let (lo, hi, n) = cfg.theta_grid;
    let grid = ThetaGrid::new(lo, hi, n)?;
    let family = PitchforkFamily {
        dt_factor: cfg.dt_factor,
    };
    let base = SimConfig::new(cfg.dt, cfg.horizon, cfg.n_paths, seed, cfg.x0.to_vec());
    let mut per_theta = Table::new(
        "worst_case_theta.csv",
        &["epsilon", "theta", "mean", "std_error"],
    );
    let mut table = Table::new(FILE, &["epsilon", "value", "argmax_theta", "dt"]);
    let mut values = vec![];
    for &eps in &cfg.epsilons {
        let ctx = format!("worst_case at epsilon = {eps}");
        let mut sim = base.clone();
        sim.dt = family.dt(eps, &base);
        let samples = grid
            .values()
            .iter()
            .map(|&theta| {
                let (full, reduced) = family.systems(eps, theta)?;
                coupled_terminal_error(&full, &reduced, &sim)
            })
            .collect::<sfuq_core::Result<Vec<_>>>()
            .map_err(|e| CliError::solver(&ctx, e))?;
        let est = worst_case_expectation(
            &grid,
            |theta| {
                let i = grid.values().iter().position(|t| *t == theta).unwrap();
                samples[i].clone()
            },
            |v| *v,
        )
        .map_err(|e| CliError::solver(&ctx, e))?;
        for m in &est.per_theta_means {
            per_theta.push(vec![
                eps.into(),
                m.theta.into(),
                m.mean.into(),
                m.std_error.into(),
            ]);
        }
        table.push(vec![
            eps.into(),
            est.value.into(),
            est.argmax_theta.into(),
            sim.dt.into(),
        ]);
        c.head(format!("worst_case[{eps}]"), est.value, FILE, "value");
        c.diag(
            format!("argmax_theta[{eps}]"),
            est.argmax_theta,
            FILE,
            "argmax_theta",
        );
        values.push((eps, est.value));
    }
    values.sort_by(|a, b| b.0.total_cmp(&a.0));
    let decreasing = values.windows(2).all(|w| w[1].1 < w[0].1);
    let mut summary = Table::new("worst_case_summary.csv", &["n_epsilons", "decreasing"]);
    summary.push(vec![values.len().into(), decreasing.into()]);
    c.table(per_theta);
    c.table(table);
    c.table(summary);
    Ok(())
}

/// A matplotlib script that plots the CSVs of one experiment kind.
pub fn plot_script(kind: ExperimentKind) -> String {
    let body = match kind {
        ExperimentKind::LqTable => {
            "d = pd.read_csv(here / 'lq_table.csv')\n\
             plt.loglog(d.epsilon, d.delta_v, 'o-')\n\
             plt.xlabel('epsilon'); plt.ylabel('delta_v')\n"
        }
        ExperimentKind::TriadCase => {
            "for name in ['full', 'limit']:\n\
             \x20   d = pd.read_csv(here / f'triad_{name}_sigma_star.csv')\n\
             \x20   plt.step(d.t, d.sigma_star, where='post', label=name)\n\
             plt.xlabel('t'); plt.ylabel('worst-case lambda^2'); plt.legend()\n"
        }
        ExperimentKind::StrongRate => {
            "d = pd.read_csv(here / 'strong_rate.csv')\n\
             plt.loglog(d.epsilon, d.error, 'o-')\n\
             plt.title(f'slope {d.slope_overall[0]:.3f}')\n\
             plt.xlabel('epsilon'); plt.ylabel('E sup |R - Rbar|^2')\n"
        }
        ExperimentKind::SigmaStar => {
            "d = pd.read_csv(here / 'sigma_star.csv')\n\
             d0 = d[d.t == d.t.min()]\n\
             if 'x1' in d:\n\
             \x20   plt.scatter(d0.x0, d0.x1, c=d0.sigma_star, marker='s')\n\
             \x20   plt.colorbar(label='sigma*')\n\
             else:\n\
             \x20   plt.step(d0.x0, d0.sigma_star, where='mid')\n\
             plt.xlabel('x0')\n"
        }
        ExperimentKind::PitchforkScan => {
            "d = pd.read_csv(here / 'pitchfork_field.csv')\n\
             roots = pd.read_csv(here / 'pitchfork_roots.csv')\n\
             for theta, g in d.groupby('theta'):\n\
             \x20   plt.plot(g.r, g.f, label=f'theta={theta:g}')\n\
             plt.scatter(roots.root, 0 * roots.root, c=roots.stable.map({True: 'k', False: 'w'}), edgecolors='k', zorder=3)\n\
             plt.axhline(0, color='grey', lw=0.5)\n\
             plt.xlabel('r'); plt.ylabel('F(r, theta)'); plt.legend()\n"
        }
        ExperimentKind::WorstCase => {
            "d = pd.read_csv(here / 'worst_case.csv')\n\
             plt.loglog(d.epsilon, d.value, 'o-')\n\
             plt.xlabel('epsilon'); plt.ylabel('worst-case E|R_T - Rbar_T|')\n"
        }
    };
    format!(
        "from pathlib import Path\n\n\
         import matplotlib.pyplot as plt\n\
         import pandas as pd\n\n\
         here = Path(__file__).resolve().parent\n\
         {body}\
         plt.tight_layout()\n\
         plt.savefig(here / '{}.png', dpi=150)\n",
        kind.section()
    )
}
