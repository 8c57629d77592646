//! Cross-checks between the finite-difference and 2BSDE solvers, and
//! structural properties that hold across modules.

use sfuq_core::twobsde::ApproximatorSpec;
use sfuq_core::{
    make_lq_problem, make_triad_qoi_problem, reduce_lq, riccati_value, simulate, solve_2bsde,
    solve_ghjb, solve_ghjb_richardson, Axis, GhjbProblem, GridSpec, MultiscaleLQModel,
    RiccatiProblem, SimConfig, TriadModel, TriadSystem, UncertaintyInterval,
};

fn iv(lo: f64, hi: f64) -> UncertaintyInterval {
    UncertaintyInterval::new(lo, hi).unwrap()
}

fn agree(fd: f64, bsde: f64) -> bool {
    (fd - bsde).abs() <= (0.02 * fd.abs()).max(0.02)
}

fn fd_value(
    problem: &GhjbProblem,
    theta: &UncertaintyInterval,
    axes: Vec<Axis>,
    t: f64,
    x: &[f64],
) -> f64 {
    let grid = GridSpec::with_stable_dt(axes, t, problem, theta, 2.0).unwrap();
    solve_ghjb_richardson(problem, theta, &grid, &[])
        .unwrap()
        .value_at_start(x)
}

#[test]
fn fd_and_2bsde_agree_on_lq_problems() {
    let sigma = iv(0.8, 1.0);
    let model = MultiscaleLQModel::regulator_benchmark(0.3, sigma, 0.1).unwrap();
    let reduced = reduce_lq(&model).unwrap();
    let spec = ApproximatorSpec::default();

    let fd_full = fd_value(
        &GhjbProblem::lq_full(&model).unwrap(),
        &sigma,
        vec![
            Axis::new(-3.0, 5.0, 40).unwrap(),
            Axis::new(-5.0, 5.0, 30).unwrap(),
        ],
        0.1,
        &[1.0, 0.5],
    );
    let bsde_full = solve_2bsde(
        &make_lq_problem(&model, vec![1.0, 0.5]).unwrap(),
        &spec,
        50,
        20_000,
        1,
    )
    .unwrap()
    .y0;
    assert!(
        agree(fd_full, bsde_full),
        "full: fd {fd_full}, 2bsde {bsde_full}"
    );

    let fd_red = fd_value(
        &GhjbProblem::lq_reduced(&reduced).unwrap(),
        &sigma,
        vec![Axis::new(-3.0, 5.0, 80).unwrap()],
        0.1,
        &[1.0],
    );
    let bsde_red = solve_2bsde(
        &make_lq_problem(&reduced, vec![1.0]).unwrap(),
        &spec,
        50,
        20_000,
        2,
    )
    .unwrap()
    .y0;
    assert!(
        agree(fd_red, bsde_red),
        "reduced: fd {fd_red}, 2bsde {bsde_red}"
    );
}

#[test]
fn fd_and_2bsde_agree_on_triad_limit() {
    for (a, lambda) in [
        ([1.0, 1.0, -2.0], (0.8, 1.2)),
        ([0.75, 0.25, -1.0], (1.0, 2.0)),
    ] {
        let model = TriadModel::new(a[0], a[1], a[2], iv(lambda.0, lambda.1), 0.2, 1.0).unwrap();
        let fd = fd_value(
            &GhjbProblem::triad_limit_qoi(&model.limit(model.lambda.midpoint())),
            &model.lambda.squared(),
            vec![
                Axis::new(-1.0, 3.0, 40).unwrap(),
                Axis::new(-4.0, 0.0, 40).unwrap(),
            ],
            0.1,
            &[1.0, -2.0],
        );
        let problem =
            make_triad_qoi_problem(&model, TriadSystem::Limit, 0.1, vec![1.0, -2.0]).unwrap();
        let bsde = solve_2bsde(&problem, &ApproximatorSpec::default(), 50, 50_000, 5)
            .unwrap()
            .y0;
        assert!(agree(fd, bsde), "A = {a:?}: fd {fd}, 2bsde {bsde}");
    }
}

#[test]
fn wider_interval_never_lowers_the_value() {
    let model = TriadModel::new(1.0, 2.0, -3.0, iv(0.8, 1.5), 0.2, 1.0).unwrap();
    let problem = GhjbProblem::triad_limit_qoi(&model.limit(1.0));
    let wide = iv(0.8, 1.5).squared();
    let narrow = iv(1.0, 1.2).squared();
    let axes = vec![
        Axis::new(-1.0, 3.0, 20).unwrap(),
        Axis::new(-4.0, 0.0, 20).unwrap(),
    ];
    // one grid for both, so the two schemes differ only in the interval
    let grid = GridSpec::with_stable_dt(axes, 0.2, &problem, &wide, 2.0).unwrap();
    let vw = solve_ghjb(&problem, &wide, &grid, &[]).unwrap();
    let vn = solve_ghjb(&problem, &narrow, &grid, &[]).unwrap();
    // boundary nodes come from extrapolation, not from the scheme
    let interior = |node: usize| {
        let (i, j) = (node % 21, node / 21);
        (1..20).contains(&i) && (1..20).contains(&j)
    };
    for (node, (w, n)) in vw
        .initial()
        .values
        .iter()
        .zip(&vn.initial().values)
        .enumerate()
    {
        if interior(node) {
            assert!(
                w >= &(n - 1e-12),
                "at {:?}: wide {w} < narrow {n}",
                grid.coords(node)
            );
        }
    }
}

#[test]
fn fd_error_shrinks_under_refinement() {
    let sigma = UncertaintyInterval::degenerate(1.0).unwrap();
    let model = MultiscaleLQModel::regulator_benchmark(0.2, sigma, 0.1).unwrap();
    let reduced = reduce_lq(&model).unwrap();
    let exact = riccati_value(&RiccatiProblem::lq_reduced(&reduced), 1.0, 0.0, &[1.0]).unwrap();
    let problem = GhjbProblem::lq_reduced(&reduced).unwrap();
    let mut last = f64::INFINITY;
    for n in [20, 40, 80, 160] {
        let grid = GridSpec::with_stable_dt(
            vec![Axis::new(-3.0, 5.0, n).unwrap()],
            0.1,
            &problem,
            &sigma,
            2.0,
        )
        .unwrap();
        let v = solve_ghjb(&problem, &sigma, &grid, &[])
            .unwrap()
            .value_at_start(&[1.0]);
        let err = (v - exact).abs();
        assert!(err < last, "n = {n}: error {err} after {last}");
        last = err;
    }
}

#[test]
fn higher_degree_fits_the_terminal_condition_better() {
    let model = TriadModel::new(1.0, 1.0, -2.0, iv(0.8, 1.2), 0.2, 1.0).unwrap();
    let problem = make_triad_qoi_problem(&model, TriadSystem::Limit, 0.1, vec![1.0, -2.0]).unwrap();
    let mismatch = |degree| {
        let spec = ApproximatorSpec::polynomial(degree, 1e-8).unwrap();
        solve_2bsde(&problem, &spec, 20, 20_000, 9)
            .unwrap()
            .terminal_mismatch
    };
    let (m1, m2, m3) = (mismatch(1), mismatch(2), mismatch(3));
    assert!(m2 < m1 && m3 < m2, "mismatch by degree: {m1}, {m2}, {m3}");
}

#[test]
fn results_do_not_depend_on_the_thread_count() {
    let model = MultiscaleLQModel::regulator_benchmark(0.3, iv(0.8, 1.0), 0.1).unwrap();
    let problem = make_lq_problem(&model, vec![1.0, 0.5]).unwrap();
    let spec = ApproximatorSpec::default();
    let cfg = SimConfig::new(1e-3, 0.1, 3000, 4, vec![1.0, 0.5]);
    let system = sfuq_core::sde_sim::LinearSystem::lq_full(&model, 0.9);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let sol = solve_2bsde(&problem, &spec, 10, 3000, 8).unwrap();
                let ens = simulate(&system, &cfg).unwrap();
                (sol.y0, sol.z0, sol.terminal_mismatch, ens.states)
            })
    };
    assert_eq!(run(1), run(4));
}
