//! Forward simulation of slow-fast and reduced systems.
//!
//! Every path `p` draws its Brownian increments from [`PathRng`] keyed by
//! `(master_seed, p)`, so ensembles are reproducible bit for bit and two
//! systems simulated with the same configuration see identical noise.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{
    triad_full_drift, triad_limit_diffusion, triad_limit_drift, FastScaling, MultiscaleLQModel,
    PitchforkModel, TriadLimit, TriadModel,
};
use crate::rng::PathRng;
use crate::sublinear::{worst_case_expectation, ThetaGrid, WorstCaseEstimate};

/// States whose Euclidean norm exceeds this abort the path.
pub const BLOW_UP_NORM: f64 = 1e8;

/// Autonomous SDE `dX = b(X) dt + σ(X) dW`.
pub trait SdeSystem: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `dim × noise_dim` diffusion matrix.
    fn diffusion(&self, x: &[f64], out: &mut [f64]);
    /// `(σ·∇)σ` for scalar noise, used by the Milstein correction. Returns
    /// `false` when the system does not provide it.
    fn diffusion_derivative(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

impl<S: SdeSystem + ?Sized> SdeSystem for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (**self).drift(x, out)
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (**self).diffusion(x, out)
    }
    fn diffusion_derivative(&self, x: &[f64], out: &mut [f64]) -> bool {
        (**self).diffusion_derivative(x, out)
    }
}

/// An [`SdeSystem`] assembled from closures.
pub struct FnSystem<B, S> {
    dim: usize,
    noise_dim: usize,
    drift: B,
    diffusion: S,
}

impl<B, S> FnSystem<B, S>
where
    B: Fn(&[f64], &mut [f64]) + Send + Sync,
    S: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, noise_dim: usize, drift: B, diffusion: S) -> Self {
        Self {
            dim,
            noise_dim,
            drift,
            diffusion,
        }
    }
}

impl<B, S> SdeSystem for FnSystem<B, S>
where
    B: Fn(&[f64], &mut [f64]) + Send + Sync,
    S: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }
}

/// Linear system `dX = A X dt + C dW`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || c.nrows() != a.nrows() {
            return Err(Error::config("linear system dimensions are inconsistent"));
        }
        Ok(Self { a, c })
    }

    /// The uncontrolled full system `dX = A^ε X dt + √σ C^ε dW`.
    pub fn lq_full(model: &MultiscaleLQModel, sigma: f64) -> Self {
        Self {
            a: model.drift_matrix(),
            c: model.noise_matrix() * sigma.sqrt(),
        }
    }

    /// The reduced system driven through `D̄` by the full-system noise:
    /// `dR = Ā R dt + √σ D̄ (C1; C2) dW`.
    pub fn lq_reduced(model: &MultiscaleLQModel, sigma: f64) -> Result<Self> {
        let red = crate::models::reduce_lq(model)?;
        let b = &model.blocks;
        let mut c = DMatrix::zeros(b.slow_dim() + b.fast_dim(), b.noise_dim());
        c.rows_mut(0, b.slow_dim()).copy_from(&b.c1);
        c.rows_mut(b.slow_dim(), b.fast_dim()).copy_from(&b.c2);
        Ok(Self {
            a: red.a_bar,
            c: &red.d_bar * c * sigma.sqrt(),
        })
    }
}

impl SdeSystem for LinearSystem {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn noise_dim(&self) -> usize {
        self.c.ncols()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let n = self.a.nrows();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            *o = (0..n).map(|j| self.a[(i, j)] * x[j]).sum();
        }
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        let (n, m) = self.c.shape();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = self.c[(i, j)];
            }
        }
    }
    fn diffusion_derivative(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        self.c.ncols() == 1
    }
}

/// Full triad system at a fixed noise level.
#[derive(Debug, Clone, Copy)]
pub struct TriadFullSystem {
    pub model: TriadModel,
    pub lambda_value: f64,
}

impl SdeSystem for TriadFullSystem {
    fn dim(&self) -> usize {
        3
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&triad_full_drift(&self.model, [x[0], x[1], x[2]]));
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = self.lambda_value / self.model.epsilon;
    }
    fn diffusion_derivative(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
}

/// Homogenised triad limit with multiplicative scalar noise.
#[derive(Debug, Clone, Copy)]
pub struct TriadLimitSystem(pub TriadLimit);

impl SdeSystem for TriadLimitSystem {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&triad_limit_drift(&self.0, [x[0], x[1]]));
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&triad_limit_diffusion(&self.0, [x[0], x[1]]));
    }
    fn diffusion_derivative(&self, x: &[f64], out: &mut [f64]) -> bool {
        // σ = (λ/γ)(A1 r2, A2 r1) ⇒ (σ·∇)σ = (λ/γ)² A1 A2 r.
        let l = &self.0;
        let k = (l.lambda_value / l.gamma).powi(2) * l.a1 * l.a2;
        out[0] = k * x[0];
        out[1] = k * x[1];
        true
    }
}

/// Slow-fast pitchfork example.
#[derive(Debug, Clone, Copy)]
pub struct PitchforkFullSystem(pub PitchforkModel);

impl SdeSystem for PitchforkFullSystem {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0.full_drift([x[0], x[1]]));
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = self.0.fast_noise();
    }
    fn diffusion_derivative(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
}

/// The deterministic averaged pitchfork ODE, written as an SDE with one
/// (unused) noise channel so it can be coupled with the full system.
#[derive(Debug, Clone, Copy)]
pub struct PitchforkLimitSystem {
    pub theta: f64,
}

impl SdeSystem for PitchforkLimitSystem {
    fn dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = crate::models::pitchfork_limit_vector_field(self.theta, x[0]);
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_derivative(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    /// Milstein correction for scalar noise; needs
    /// [`SdeSystem::diffusion_derivative`].
    Milstein,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    pub initial_state: Vec<f64>,
    pub scheme: Scheme,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, master_seed: u64, x0: Vec<f64>) -> Self {
        Self {
            dt,
            horizon,
            n_paths,
            master_seed,
            initial_state: x0,
            scheme: Scheme::EulerMaruyama,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(Error::config(format!(
                "dt must lie in (0, T], got dt = {}, T = {}",
                self.dt, self.horizon
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths must be at least 1"));
        }
        Ok(())
    }

    /// `round(T / dt)`.
    pub fn n_steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    /// The step actually taken, `T / n_steps`, which differs from `dt` by less
    /// than half a step over the horizon.
    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps() as f64
    }
}

/// Stored ensemble: `states[path][step][dim]` and the Brownian increments
/// `increments[path][step][noise]` that produced it (flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub dim: usize,
    pub noise_dim: usize,
    pub n_paths: usize,
    pub master_seed: u64,
    pub states: Vec<f64>,
    pub increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.times.len() + step) * self.dim;
        &self.states[off..off + self.dim]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.n_steps())
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.n_steps() + step) * self.noise_dim;
        &self.increments[off..off + self.noise_dim]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        let len = self.n_steps() * self.noise_dim;
        &self.increments[path * len..(path + 1) * len]
    }

    /// CSV with header `path,step,t,x0,...,x{d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        wr.write_record(&header)?;
        for p in 0..self.n_paths {
            for (k, t) in self.times.iter().enumerate() {
                let mut rec = vec![p.to_string(), k.to_string(), t.to_string()];
                rec.extend(self.state(p, k).iter().map(|v| v.to_string()));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

struct Stepper<'a, S: SdeSystem + ?Sized> {
    system: &'a S,
    scheme: Scheme,
    h: f64,
    sqrt_h: f64,
    drift: Vec<f64>,
    diff: Vec<f64>,
    deriv: Vec<f64>,
}

impl<'a, S: SdeSystem + ?Sized> Stepper<'a, S> {
    fn new(system: &'a S, scheme: Scheme, h: f64) -> Self {
        let d = system.dim();
        Self {
            system,
            scheme,
            h,
            sqrt_h: h.sqrt(),
            drift: vec![0.0; d],
            diff: vec![0.0; d * system.noise_dim()],
            deriv: vec![0.0; d],
        }
    }

    /// Advance `x` by one step with increments `dw` (already scaled by √h).
    /// Returns false on blow-up.
    fn step(&mut self, x: &mut [f64], dw: &[f64]) -> bool {
        let m = self.system.noise_dim();
        self.system.drift(x, &mut self.drift);
        self.system.diffusion(x, &mut self.diff);
        let milstein =
            self.scheme == Scheme::Milstein && self.system.diffusion_derivative(x, &mut self.deriv);
        let mut norm2 = 0.0;
        for i in 0..x.len() {
            let mut dx = self.drift[i] * self.h;
            for j in 0..m {
                dx += self.diff[i * m + j] * dw[j];
            }
            if milstein {
                dx += 0.5 * self.deriv[i] * (dw[0] * dw[0] - self.h);
            }
            x[i] += dx;
            norm2 += x[i] * x[i];
        }
        norm2.is_finite() && norm2.sqrt() <= BLOW_UP_NORM
    }
}

fn check_scheme<S: SdeSystem + ?Sized>(system: &S, scheme: Scheme) -> Result<()> {
    if scheme == Scheme::Milstein {
        let mut probe = vec![0.0; system.dim()];
        let x = vec![0.0; system.dim()];
        if system.noise_dim() != 1 || !system.diffusion_derivative(&x, &mut probe) {
            return Err(Error::config(
                "Milstein scheme needs scalar noise and a diffusion derivative",
            ));
        }
    }
    Ok(())
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect::<Result<Vec<_>>>().map(|_| ())
}

/// Simulate `config.n_paths` paths of `system` from `config.initial_state`.
pub fn simulate<S: SdeSystem + ?Sized>(system: &S, config: &SimConfig) -> Result<PathEnsemble> {
    config.validate()?;
    let d = system.dim();
    let m = system.noise_dim();
    if config.initial_state.len() != d {
        return Err(Error::config(format!(
            "initial state has dimension {}, system has {d}",
            config.initial_state.len()
        )));
    }
    check_scheme(system, config.scheme)?;
    let n = config.n_steps();
    let h = config.step();
    let mut states = vec![0.0; config.n_paths * (n + 1) * d];
    let mut increments = vec![0.0; config.n_paths * n * m];
    let results: Vec<Result<()>> = states
        .par_chunks_mut((n + 1) * d)
        .zip(increments.par_chunks_mut(n * m))
        .enumerate()
        .map(|(p, (xs, dws))| {
            let mut rng = PathRng::new(config.master_seed, p as u64);
            let mut stepper = Stepper::new(system, config.scheme, h);
            xs[..d].copy_from_slice(&config.initial_state);
            for k in 0..n {
                let dw = &mut dws[k * m..(k + 1) * m];
                rng.fill_normal(dw);
                dw.iter_mut().for_each(|v| *v *= stepper.sqrt_h);
                let (head, tail) = xs.split_at_mut((k + 1) * d);
                tail[..d].copy_from_slice(&head[k * d..]);
                if !stepper.step(&mut tail[..d], dw) {
                    return Err(Error::Simulation {
                        path: p,
                        step: k + 1,
                    });
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(PathEnsemble {
        times: (0..=n).map(|k| k as f64 * h).collect(),
        dim: d,
        noise_dim: m,
        n_paths: config.n_paths,
        master_seed: config.master_seed,
        states,
        increments,
    })
}

fn check_coupling<F, R>(full: &F, reduced: &R, slow_dim: usize, config: &SimConfig) -> Result<()>
where
    F: SdeSystem + ?Sized,
    R: SdeSystem + ?Sized,
{
    if full.noise_dim() != reduced.noise_dim() {
        return Err(Error::config(format!(
            "driver dimension mismatch: full {} vs reduced {}",
            full.noise_dim(),
            reduced.noise_dim()
        )));
    }
    if reduced.dim() != slow_dim || slow_dim > full.dim() {
        return Err(Error::config(
            "slow projection does not match the reduced system",
        ));
    }
    if config.initial_state.len() != full.dim() {
        return Err(Error::config(
            "initial state does not match the full system",
        ));
    }
    Ok(())
}

/// Simulate a full system and its reduced counterpart on identical Brownian
/// increments. The reduced system starts from the first `reduced.dim()`
/// components of `config.initial_state`.
pub fn simulate_coupled<F, R>(
    full: &F,
    reduced: &R,
    config: &SimConfig,
) -> Result<(PathEnsemble, PathEnsemble)>
where
    F: SdeSystem + ?Sized,
    R: SdeSystem + ?Sized,
{
    check_coupling(full, reduced, reduced.dim(), config)?;
    let full_ens = simulate(full, config)?;
    let mut red_config = config.clone();
    red_config.initial_state = config.initial_state[..reduced.dim()].to_vec();
    let red_ens = simulate(reduced, &red_config)?;
    Ok((full_ens, red_ens))
}

/// Run coupled paths without storing them and reduce each path with
/// `accumulate(acc, x_slow, r)` after every step.
fn coupled_fold<F, R>(
    full: &F,
    reduced: &R,
    config: &SimConfig,
    accumulate: impl Fn(f64, &[f64], &[f64]) -> f64 + Sync,
) -> Result<Vec<f64>>
where
    F: SdeSystem + ?Sized,
    R: SdeSystem + ?Sized,
{
    config.validate()?;
    let k = reduced.dim();
    check_coupling(full, reduced, k, config)?;
    check_scheme(full, config.scheme)?;
    check_scheme(reduced, config.scheme)?;
    let n = config.n_steps();
    let h = config.step();
    let m = full.noise_dim();
    let results: Vec<Result<f64>> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = PathRng::new(config.master_seed, p as u64);
            let mut sf = Stepper::new(full, config.scheme, h);
            let mut sr = Stepper::new(reduced, config.scheme, h);
            let mut x = config.initial_state.clone();
            let mut r = config.initial_state[..k].to_vec();
            let mut dw = vec![0.0; m];
            let mut acc = 0.0;
            for step in 0..n {
                rng.fill_normal(&mut dw);
                dw.iter_mut().for_each(|v| *v *= sf.sqrt_h);
                if !sf.step(&mut x, &dw) || !sr.step(&mut r, &dw) {
                    return Err(Error::Simulation {
                        path: p,
                        step: step + 1,
                    });
                }
                acc = accumulate(acc, &x[..k], &r);
            }
            Ok(acc)
        })
        .collect();
    results.into_iter().collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Per-path `sup_t |R^ε_t − R̄_t|²` on the simulation grid, computed on the
/// fly for coupled systems without storing the ensembles.
pub fn coupled_sup_sq_error<F, R>(full: &F, reduced: &R, config: &SimConfig) -> Result<Vec<f64>>
where
    F: SdeSystem + ?Sized,
    R: SdeSystem + ?Sized,
{
    coupled_fold(full, reduced, config, |sup, x, r| sup.max(sq_dist(x, r)))
}

/// Per-path terminal distance `|R^ε_T − R̄_T|` for coupled systems.
pub fn coupled_terminal_error<F, R>(full: &F, reduced: &R, config: &SimConfig) -> Result<Vec<f64>>
where
    F: SdeSystem + ?Sized,
    R: SdeSystem + ?Sized,
{
    coupled_fold(full, reduced, config, |_, x, r| sq_dist(x, r).sqrt())
}

/// A family of coupled (full, reduced) systems indexed by `ε` and a scalar
/// uncertain parameter.
pub trait CoupledFamily: Sync {
    type Full: SdeSystem;
    type Reduced: SdeSystem;
    fn systems(&self, epsilon: f64, theta: f64) -> Result<(Self::Full, Self::Reduced)>;
    /// Time step for a given `ε`; defaults to the configured one.
    fn dt(&self, _epsilon: f64, base: &SimConfig) -> f64 {
        base.dt
    }
}

/// The uncontrolled LQ model family with `σ` as the uncertain parameter.
#[derive(Debug, Clone)]
pub struct LqFamily {
    pub base: MultiscaleLQModel,
    /// Time step is `dt_factor · ε^p` (capped by the configured `dt`), with
    /// `p` the fast scaling exponent, so the fast block stays resolved.
    pub dt_factor: f64,
}

impl LqFamily {
    pub const DEFAULT_DT_FACTOR: f64 = 1e-4;

    pub fn new(base: MultiscaleLQModel) -> Self {
        Self {
            base,
            dt_factor: Self::DEFAULT_DT_FACTOR,
        }
    }
}

impl CoupledFamily for LqFamily {
    type Full = LinearSystem;
    type Reduced = LinearSystem;

    fn systems(&self, epsilon: f64, theta: f64) -> Result<(LinearSystem, LinearSystem)> {
        let model = self.base.with_epsilon(epsilon)?;
        Ok((
            LinearSystem::lq_full(&model, theta),
            LinearSystem::lq_reduced(&model, theta)?,
        ))
    }

    fn dt(&self, epsilon: f64, base: &SimConfig) -> f64 {
        let p = match self.base.scaling {
            FastScaling::Sqrt => 1,
            FastScaling::Linear => 2,
        };
        base.dt.min(self.dt_factor * epsilon.powi(p))
    }
}

/// The slow-fast pitchfork family with `θ` as the uncertain parameter.
#[derive(Debug, Clone, Copy)]
pub struct PitchforkFamily {
    /// Time step is `dt_factor · ε` (capped by the configured `dt`).
    pub dt_factor: f64,
}

impl Default for PitchforkFamily {
    fn default() -> Self {
        Self { dt_factor: 1e-2 }
    }
}

impl CoupledFamily for PitchforkFamily {
    type Full = PitchforkFullSystem;
    type Reduced = PitchforkLimitSystem;

    fn systems(&self, epsilon: f64, theta: f64) -> Result<(Self::Full, Self::Reduced)> {
        Ok((
            PitchforkFullSystem(PitchforkModel::new(theta, epsilon)?),
            PitchforkLimitSystem { theta },
        ))
    }

    fn dt(&self, epsilon: f64, base: &SimConfig) -> f64 {
        base.dt.min(self.dt_factor * epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrongErrorReport {
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub estimates: Vec<WorstCaseEstimate>,
    /// `None` when the fit is degenerate (all errors below 1e-14).
    pub fitted_slope: Option<f64>,
    pub intercept: Option<f64>,
}

impl StrongErrorReport {
    /// CSV with header `epsilon,error,slope_overall`; an undefined slope is
    /// written as `NaN`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wr.write_record(["epsilon", "error", "slope_overall"])?;
        let slope = self.fitted_slope.unwrap_or(f64::NAN).to_string();
        for (e, err) in self.epsilons.iter().zip(&self.errors) {
            wr.write_record([e.to_string(), err.to_string(), slope.clone()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Least-squares line through `(x, y)`: returns `(slope, intercept)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Log-log slope of the worst-case strong error over a list of `ε`.
pub fn fit_rate(epsilons: &[f64], errors: &[f64]) -> Option<(f64, f64)> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = epsilons
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e >= 1e-14)
        .map(|(e, err)| (e.ln(), err.ln()))
        .unzip();
    fit_line(&lx, &ly)
}

/// For each `ε`, the worst case over `theta_grid` of `E sup_t |R^ε − R̄|²` on
/// coupled ensembles, and the fitted log-log slope.
pub fn strong_error_rate<F: CoupledFamily>(
    family: &F,
    eps_list: &[f64],
    config: &SimConfig,
    theta_grid: &ThetaGrid,
) -> Result<StrongErrorReport> {
    if eps_list.len() < 3 {
        return Err(Error::config(
            "strong rate needs at least three epsilon values",
        ));
    }
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) || eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::config(
            "epsilon list must be positive and strictly decreasing",
        ));
    }
    if eps_list[0] / eps_list[eps_list.len() - 1] < 4.0 {
        return Err(Error::config("epsilon list must span at least a factor 4"));
    }
    let mut errors = Vec::with_capacity(eps_list.len());
    let mut estimates = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut cfg = config.clone();
        cfg.dt = family.dt(eps, config);
        let mut per_theta = Vec::with_capacity(theta_grid.len());
        for &theta in theta_grid.values() {
            let (full, reduced) = family.systems(eps, theta)?;
            per_theta.push(coupled_sup_sq_error(&full, &reduced, &cfg)?);
        }
        let est = worst_case_expectation(
            theta_grid,
            |theta| {
                let i = theta_grid
                    .values()
                    .iter()
                    .position(|t| *t == theta)
                    .unwrap_or(0);
                per_theta[i].clone()
            },
            |x| *x,
        )?;
        errors.push(est.value);
        estimates.push(est);
    }
    let fit = fit_rate(eps_list, &errors);
    Ok(StrongErrorReport {
        epsilons: eps_list.to_vec(),
        errors,
        estimates,
        fitted_slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
    })
}
