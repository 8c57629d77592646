//! Experiment configuration files.
//!
//! A configuration is a TOML document with an `[experiment]` header and
//! exactly one section named after the experiment kind. Unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfuq_core::{Axis, FastScaling, MultiscaleLQModel, ThetaGrid, TriadModel, UncertaintyInterval};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LqTable,
    TriadCase,
    StrongRate,
    SigmaStar,
    PitchforkScan,
    WorstCase,
}

impl ExperimentKind {
    pub fn section(self) -> &'static str {
        match self {
            ExperimentKind::LqTable => "lq_table",
            ExperimentKind::TriadCase => "triad_case",
            ExperimentKind::StrongRate => "strong_rate",
            ExperimentKind::SigmaStar => "sigma_star",
            ExperimentKind::PitchforkScan => "pitchfork_scan",
            ExperimentKind::WorstCase => "worst_case",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentHeader {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Output directory; relative paths resolve against the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Also write a matplotlib script that plots the emitted CSVs.
    #[serde(default)]
    pub plot_script: bool,
}

/// `[lo, hi, n_cells]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisConfig(pub f64, pub f64, pub usize);

impl AxisConfig {
    pub fn axis(self) -> Result<Axis, CliError> {
        Ok(Axis::new(self.0, self.1, self.2)?)
    }
}

/// Finite-difference settings shared by the grid-based experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub axes: Vec<AxisConfig>,
    /// Combine the grid with its refinement to cancel the first-order error.
    #[serde(default = "default_true")]
    pub richardson: bool,
    /// Multiplier on the control drift estimate in the stability bound.
    #[serde(default = "default_control_margin")]
    pub control_margin: f64,
}

fn default_true() -> bool {
    true
}

fn default_control_margin() -> f64 {
    2.0
}

/// The linear-quadratic slow-fast model with scalar blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqModelConfig {
    /// `[A11, A12, A21, A22]`.
    pub a: [f64; 4],
    /// `[B1, B2]`.
    pub b: [f64; 2],
    /// `[C1, C2]`.
    pub c: [f64; 2],
    pub q0: f64,
    pub q1: f64,
    /// 1 for `ε^{-1/2}, ε^{-1}`; 2 for `ε^{-1}, ε^{-2}`.
    pub fast_scaling: u32,
}

impl Default for LqModelConfig {
    fn default() -> Self {
        Self {
            a: [-2.0, -1.0, 1.0, -2.0],
            b: [0.1, 2.0],
            c: [0.1, 2.0],
            q0: 0.0,
            q1: 1.0,
            fast_scaling: 2,
        }
    }
}

impl LqModelConfig {
    pub fn build(
        &self,
        epsilon: f64,
        sigma: UncertaintyInterval,
        horizon: f64,
    ) -> Result<MultiscaleLQModel, CliError> {
        let [a11, a12, a21, a22] = self.a;
        let blocks = sfuq_core::BlockMatrices::scalar(
            a11, a12, a21, a22, self.b[0], self.b[1], self.c[0], self.c[1],
        )?;
        Ok(MultiscaleLQModel::new(
            blocks,
            epsilon,
            FastScaling::from_exponent(self.fast_scaling)?,
            nalgebra::DMatrix::from_element(1, 1, self.q0),
            nalgebra::DMatrix::from_element(1, 1, self.q1),
            horizon,
            sigma,
        )?)
    }
}

fn interval(v: [f64; 2]) -> Result<UncertaintyInterval, CliError> {
    Ok(UncertaintyInterval::new(v[0], v[1])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqTableConfig {
    #[serde(default)]
    pub model: LqModelConfig,
    pub epsilons: Vec<f64>,
    pub sigma: [f64; 2],
    pub horizon: f64,
    pub x0: [f64; 2],
    /// Grid for the full problem (slow axis, fast axis).
    pub full_grid: FdConfig,
    /// Grid for the averaged problem (slow axis).
    pub reduced_grid: FdConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoBsdeConfig {
    pub n_steps: usize,
    pub n_samples: usize,
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_spread")]
    pub initial_spread: f64,
}

fn default_degree() -> u32 {
    2
}

fn default_ridge() -> f64 {
    1e-8
}

fn default_spread() -> f64 {
    sfuq_core::TwoBsdeProblem::DEFAULT_SPREAD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriadCaseConfig {
    /// `[A1, A2, A3]`, summing to zero.
    pub coefficients: [f64; 3],
    pub lambda: [f64; 2],
    pub epsilon: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub horizon: f64,
    /// Full-system initial state `(r1, r2, u)`; the limit starts from `(r1, r2)`.
    pub x0: [f64; 3],
    pub bsde: TwoBsdeConfig,
    /// Optional finite-difference solve of the two-dimensional limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_grid: Option<FdConfig>,
}

fn default_gamma() -> f64 {
    1.0
}

impl TriadCaseConfig {
    pub fn model(&self) -> Result<TriadModel, CliError> {
        let [a1, a2, a3] = self.coefficients;
        Ok(TriadModel::new(
            a1,
            a2,
            a3,
            interval(self.lambda)?,
            self.epsilon,
            self.gamma,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongRateConfig {
    #[serde(default)]
    pub model: LqModelConfig,
    pub epsilons: Vec<f64>,
    /// Grid over the noise level `σ`; `[lo, hi, n_points]`.
    pub sigma_grid: (f64, f64, usize),
    pub horizon: f64,
    pub x0: [f64; 2],
    pub n_paths: usize,
    /// Upper bound on the time step.
    pub dt: f64,
    /// The time step is `dt_factor · ε^p` when that is smaller than `dt`.
    #[serde(default = "default_dt_factor")]
    pub dt_factor: f64,
}

fn default_dt_factor() -> f64 {
    sfuq_core::LqFamily::DEFAULT_DT_FACTOR
}

impl StrongRateConfig {
    pub fn theta_grid(&self) -> Result<ThetaGrid, CliError> {
        Ok(ThetaGrid::new(
            self.sigma_grid.0,
            self.sigma_grid.1,
            self.sigma_grid.2,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaStarProblem {
    /// `dX = −X dt + dW` with terminal `curvature · x²`.
    Quadratic { curvature: f64 },
    /// The averaged LQ problem.
    LqReduced {
        #[serde(default)]
        model: LqModelConfig,
        epsilon: f64,
    },
    /// The full LQ problem.
    LqFull {
        #[serde(default)]
        model: LqModelConfig,
        epsilon: f64,
    },
    /// Worst-case mean of `R₁(T)` for the triad limit.
    TriadLimit {
        coefficients: [f64; 3],
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaStarConfig {
    pub problem: SigmaStarProblem,
    /// The uncertain parameter interval (for the triad, the `λ` interval).
    pub interval: [f64; 2],
    pub horizon: f64,
    pub grid: FdConfig,
    /// Times at which the field is reported; `0` and `T` are always included.
    #[serde(default)]
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchforkScanConfig {
    pub thetas: Vec<f64>,
    /// Samples of `F(·, θ)`: `[lo, hi, n_points]`.
    pub r_grid: (f64, f64, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorstCaseConfig {
    pub epsilons: Vec<f64>,
    /// `[lo, hi, n_points]` over `θ`.
    pub theta_grid: (f64, f64, usize),
    pub horizon: f64,
    /// `(r0, u0)`.
    pub x0: [f64; 2],
    pub n_paths: usize,
    pub dt: f64,
    #[serde(default = "default_pitchfork_dt_factor")]
    pub dt_factor: f64,
}

fn default_pitchfork_dt_factor() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentHeader,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lq_table: Option<LqTableConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triad_case: Option<TriadCaseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_rate: Option<StrongRateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star: Option<SigmaStarConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitchfork_scan: Option<PitchforkScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_case: Option<WorstCaseConfig>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_grid(fd: &FdConfig, dim: usize, what: &str) -> Result<(), CliError> {
    if fd.axes.len() != dim {
        return Err(bad(format!(
            "{what} needs {dim} axes, got {}",
            fd.axes.len()
        )));
    }
    for a in &fd.axes {
        a.axis()?;
    }
    if !(fd.control_margin >= 1.0) {
        return Err(bad(format!("{what}: control_margin must be at least 1")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<(), CliError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(bad(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    fn sections(&self) -> Vec<ExperimentKind> {
        let mut v = vec![];
        if self.lq_table.is_some() {
            v.push(ExperimentKind::LqTable);
        }
        if self.triad_case.is_some() {
            v.push(ExperimentKind::TriadCase);
        }
        if self.strong_rate.is_some() {
            v.push(ExperimentKind::StrongRate);
        }
        if self.sigma_star.is_some() {
            v.push(ExperimentKind::SigmaStar);
        }
        if self.pitchfork_scan.is_some() {
            v.push(ExperimentKind::PitchforkScan);
        }
        if self.worst_case.is_some() {
            v.push(ExperimentKind::WorstCase);
        }
        v
    }

    /// Check the section layout and every numeric parameter.
    pub fn validate(&self) -> Result<(), CliError> {
        let kind = self.experiment.kind;
        if self.sections() != vec![kind] {
            return Err(bad(format!(
                "a `{}` experiment needs exactly one [{}] section",
                kind.section(),
                kind.section()
            )));
        }
        match kind {
            ExperimentKind::LqTable => {
                let c = self.lq_table.as_ref().unwrap();
                if c.epsilons.is_empty() {
                    return Err(bad("epsilons must not be empty"));
                }
                let sigma = interval(c.sigma)?;
                for &e in &c.epsilons {
                    c.model.build(e, sigma, c.horizon)?;
                }
                check_grid(&c.full_grid, 2, "full_grid")?;
                check_grid(&c.reduced_grid, 1, "reduced_grid")?;
            }
            ExperimentKind::TriadCase => {
                let c = self.triad_case.as_ref().unwrap();
                c.model()?;
                check_positive("horizon", c.horizon)?;
                if c.bsde.n_steps < 2 {
                    return Err(bad("bsde.n_steps must be at least 2"));
                }
                sfuq_core::twobsde::ApproximatorSpec::polynomial(c.bsde.degree, c.bsde.ridge)?;
                check_positive("bsde.initial_spread", c.bsde.initial_spread)?;
                if let Some(g) = &c.limit_grid {
                    check_grid(g, 2, "limit_grid")?;
                }
            }
            ExperimentKind::StrongRate => {
                let c = self.strong_rate.as_ref().unwrap();
                let grid = c.theta_grid()?;
                if !(grid.lo() > 0.0) {
                    return Err(bad("sigma_grid must be positive"));
                }
                for &e in &c.epsilons {
                    c.model
                        .build(e, interval([grid.lo(), grid.hi()])?, c.horizon)?;
                }
                check_positive("dt", c.dt)?;
                check_positive("dt_factor", c.dt_factor)?;
                if c.n_paths < 2 {
                    return Err(bad("n_paths must be at least 2"));
                }
            }
            ExperimentKind::SigmaStar => {
                let c = self.sigma_star.as_ref().unwrap();
                interval(c.interval)?;
                check_positive("horizon", c.horizon)?;
                let dim = match &c.problem {
                    SigmaStarProblem::Quadratic { curvature } => {
                        if !curvature.is_finite() {
                            return Err(bad("curvature must be finite"));
                        }
                        1
                    }
                    SigmaStarProblem::LqReduced { model, epsilon } => {
                        model.build(*epsilon, interval(c.interval)?, c.horizon)?;
                        1
                    }
                    SigmaStarProblem::LqFull { model, epsilon } => {
                        model.build(*epsilon, interval(c.interval)?, c.horizon)?;
                        2
                    }
                    SigmaStarProblem::TriadLimit {
                        coefficients: [a1, a2, a3],
                        gamma,
                    } => {
                        sfuq_core::TriadLimit::new(*a1, *a2, *a3, 1.0, *gamma)?;
                        2
                    }
                };
                check_grid(&c.grid, dim, "grid")?;
                if c.times.iter().any(|t| !(0.0..=c.horizon).contains(t)) {
                    return Err(bad("times must lie in [0, horizon]"));
                }
            }
            ExperimentKind::PitchforkScan => {
                let c = self.pitchfork_scan.as_ref().unwrap();
                if c.thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(bad("thetas must lie in [0, 1]"));
                }
                let (lo, hi, n) = c.r_grid;
                if !(lo < hi) || n < 2 {
                    return Err(bad("r_grid needs lo < hi and at least 2 points"));
                }
            }
            ExperimentKind::WorstCase => {
                let c = self.worst_case.as_ref().unwrap();
                let (lo, hi, n) = c.theta_grid;
                let grid = ThetaGrid::new(lo, hi, n)?;
                if grid.lo() < 0.0 || grid.hi() > 1.0 {
                    return Err(bad("theta_grid must lie in [0, 1]"));
                }
                if c.epsilons.is_empty() || c.epsilons.iter().any(|e| !(*e > 0.0)) {
                    return Err(bad("epsilons must be positive and non-empty"));
                }
                check_positive("horizon", c.horizon)?;
                check_positive("dt", c.dt)?;
                check_positive("dt_factor", c.dt_factor)?;
                if c.n_paths < 2 {
                    return Err(bad("n_paths must be at least 2"));
                }
            }
        }
        Ok(())
    }
}
