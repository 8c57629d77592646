//! Regression solver for second-order BSDEs.
//!
//! For a forward diffusion `dX = b(X) dt + σ(X) dW` and a fully nonlinear PDE
//! written as `∂v/∂t = f(t, x, v, ∇v, ∇²v)`, `v(T) = g`, the processes
//! `Y = v(t, X)`, `Z = ∇v(t, X)` and `Γ = ∇²v(t, X)` satisfy
//!
//! ```text
//! dY = f(t, X, Y, Z, Γ) dt + Z ∘ dX,     Z ∘ dX = Z·dX + ½ Tr[Γ σσᵀ] dt.
//! ```
//!
//! The solver simulates an ensemble of `X`, then walks backward:
//! `Y_N = g(X_N)`, and for `n = N−1, …, 0` it fits a least-squares surrogate
//! `φ_{n+1}` of `Y_{n+1}` on features of `X_{n+1}`, takes `Z_n = ∇φ_{n+1}(X_n)`
//! and `Γ_n = ∇²φ_{n+1}(X_n)`, and sets
//!
//! ```text
//! Y_n = Y_{n+1} − f(t_n, X_n, Y_{n+1}, Z_n, Γ_n) Δt − Z_n·ΔX_n − ½ Tr[Γ_n σσᵀ(X_n)] Δt.
//! ```
//!
//! The ensemble starts from a Gaussian cloud around `x₀`, and `y0` is the final
//! surrogate `φ₀` evaluated at `x₀`.

use std::fmt;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{triad_full_drift, MultiscaleLQModel, ReducedLQModel, TriadLimit, TriadModel};
use crate::rng::PathRng;
use crate::sde_sim::{LinearSystem, SdeSystem, TriadFullSystem, TriadLimitSystem, BLOW_UP_NORM};
use crate::sublinear::{g_argmax, g_nonlinearity, UncertaintyInterval};

/// `f(t, x, y, z, S)` with `S` row-major.
pub type Driver = Arc<dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// Parameter-free bracket `(x, z, S) ↦ a:S + ⟨z, b₁⟩` inside `G`.
pub type Bracket = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
pub type Terminal = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Largest regression condition number accepted.
pub const MAX_CONDITION: f64 = 1e10;
const CHUNK: usize = 1024;

pub struct TwoBsdeProblem {
    pub forward: Box<dyn SdeSystem>,
    pub driver: Driver,
    pub terminal: Terminal,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub theta: UncertaintyInterval,
    /// Standard deviation of the initial cloud around `x0`, per coordinate.
    pub initial_spread: f64,
    /// Largest forward Euler step; coarse steps are subdivided to respect it.
    pub max_forward_dt: Option<f64>,
    /// When present, the worst-case parameter is reported along the mean path.
    pub bracket: Option<Bracket>,
}

impl fmt::Debug for TwoBsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TwoBsdeProblem")
            .field("dim", &self.forward.dim())
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("theta", &self.theta)
            .field("initial_spread", &self.initial_spread)
            .field("max_forward_dt", &self.max_forward_dt)
            .finish_non_exhaustive()
    }
}

impl TwoBsdeProblem {
    pub const DEFAULT_SPREAD: f64 = 0.1;

    pub fn new(
        forward: Box<dyn SdeSystem>,
        driver: Driver,
        terminal: Terminal,
        horizon: f64,
        x0: Vec<f64>,
        theta: UncertaintyInterval,
    ) -> Result<Self> {
        if x0.len() != forward.dim() {
            return Err(Error::config(format!(
                "x0 has dimension {}, forward system has {}",
                x0.len(),
                forward.dim()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            forward,
            driver,
            terminal,
            horizon,
            x0,
            theta,
            initial_spread: Self::DEFAULT_SPREAD,
            max_forward_dt: None,
            bracket: None,
        })
    }

    pub fn with_spread(mut self, spread: f64) -> Self {
        self.initial_spread = spread;
        self
    }

    pub fn with_max_forward_dt(mut self, dt: f64) -> Self {
        self.max_forward_dt = Some(dt);
        self
    }

    pub fn with_bracket(mut self, bracket: Bracket) -> Self {
        self.bracket = Some(bracket);
        self
    }

    pub fn dim(&self) -> usize {
        self.forward.dim()
    }
}

/// Feature map applied to standardised inputs.
pub trait FeatureMap: Send + Sync + fmt::Debug {
    fn len(&self, dim: usize) -> usize;
    /// Features, their gradients (`len × d`) and Hessians (`len × d × d`).
    fn eval(&self, z: &[f64], phi: &mut [f64], dphi: Option<(&mut [f64], &mut [f64])>);
}

/// All monomials of total degree at most `degree`.
#[derive(Debug, Clone)]
pub struct PolynomialFeatures {
    degree: u32,
    exps: Arc<OnceLock<(usize, Vec<u32>)>>,
}

impl PartialEq for PolynomialFeatures {
    fn eq(&self, other: &Self) -> bool {
        self.degree == other.degree
    }
}

impl PolynomialFeatures {
    pub fn new(degree: u32) -> Self {
        Self {
            degree,
            exps: Arc::new(OnceLock::new()),
        }
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    /// Exponent vectors in graded order, flattened `len × dim`.
    fn exponents(&self, dim: usize) -> std::borrow::Cow<'_, [u32]> {
        let (cached_dim, cached) = self.exps.get_or_init(|| (dim, self.build_exponents(dim)));
        if *cached_dim == dim {
            std::borrow::Cow::Borrowed(cached)
        } else {
            std::borrow::Cow::Owned(self.build_exponents(dim))
        }
    }

    fn build_exponents(&self, dim: usize) -> Vec<u32> {
        let mut out = vec![];
        for total in 0..=self.degree {
            let mut e = vec![0u32; dim];
            collect_exponents(dim, total, 0, &mut e, &mut out);
        }
        out
    }
}

fn collect_exponents(dim: usize, left: u32, k: usize, e: &mut Vec<u32>, out: &mut Vec<u32>) {
    if k == dim - 1 {
        e[k] = left;
        out.extend_from_slice(e);
        return;
    }
    for p in (0..=left).rev() {
        e[k] = p;
        collect_exponents(dim, left - p, k + 1, e, out);
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

impl FeatureMap for PolynomialFeatures {
    fn len(&self, dim: usize) -> usize {
        binomial(dim as u64 + self.degree as u64, dim as u64) as usize
    }

    fn eval(&self, z: &[f64], phi: &mut [f64], dphi: Option<(&mut [f64], &mut [f64])>) {
        let d = z.len();
        let stride = self.degree as usize + 1;
        // pow[i * stride + k] = z_i^k
        let mut pow = vec![1.0; d * stride];
        for i in 0..d {
            for k in 1..stride {
                pow[i * stride + k] = pow[i * stride + k - 1] * z[i];
            }
        }
        // Π_i c_i z_i^{e_i − drop_i}, where c_i is the falling factorial
        let term = |e: &[u32], drop: [(usize, u32); 2]| -> f64 {
            let mut v = 1.0;
            for (i, &ei) in e.iter().enumerate() {
                let lower: u32 = drop.iter().filter(|(j, _)| *j == i).map(|(_, l)| l).sum();
                if ei < lower {
                    return 0.0;
                }
                for f in (ei - lower + 1)..=ei {
                    v *= f as f64;
                }
                v *= pow[i * stride + (ei - lower) as usize];
            }
            v
        };
        const NONE: (usize, u32) = (usize::MAX, 0);
        let exps = self.exponents(d);
        let exps = exps.chunks(d);
        match dphi {
            None => {
                for (k, e) in exps.enumerate() {
                    phi[k] = term(e, [NONE, NONE]);
                }
            }
            Some((grad, hess)) => {
                for (k, e) in exps.enumerate() {
                    phi[k] = term(e, [NONE, NONE]);
                    for i in 0..d {
                        grad[k * d + i] = term(e, [(i, 1), NONE]);
                        for j in 0..d {
                            hess[(k * d + i) * d + j] = term(e, [(i, 1), (j, 1)]);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum ApproximatorFamily {
    Polynomial(PolynomialFeatures),
    Features(Arc<dyn FeatureMap>),
}

#[derive(Debug, Clone)]
pub struct ApproximatorSpec {
    pub family: ApproximatorFamily,
    pub ridge: f64,
}

impl Default for ApproximatorSpec {
    fn default() -> Self {
        Self {
            family: ApproximatorFamily::Polynomial(PolynomialFeatures::new(2)),
            ridge: 1e-8,
        }
    }
}

impl ApproximatorSpec {
    pub fn polynomial(degree: u32, ridge: f64) -> Result<Self> {
        if degree < 1 {
            return Err(Error::config("polynomial degree must be at least 1"));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::config(format!(
                "ridge weight must be nonnegative, got {ridge}"
            )));
        }
        Ok(Self {
            family: ApproximatorFamily::Polynomial(PolynomialFeatures::new(degree)),
            ridge,
        })
    }

    fn map(&self) -> &dyn FeatureMap {
        match &self.family {
            ApproximatorFamily::Polynomial(p) => p,
            ApproximatorFamily::Features(f) => f.as_ref(),
        }
    }

    pub fn n_features(&self, dim: usize) -> usize {
        self.map().len(dim)
    }
}

/// A fitted surrogate `φ(x) = Σ β_k φ_k((x − mean)/scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    pub t: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub coefficients: Vec<f64>,
}

struct Workspace {
    z: Vec<f64>,
    phi: Vec<f64>,
    dphi: Vec<f64>,
    d2phi: Vec<f64>,
}

impl Workspace {
    fn new(d: usize, k: usize) -> Self {
        Self {
            z: vec![0.0; d],
            phi: vec![0.0; k],
            dphi: vec![0.0; k * d],
            d2phi: vec![0.0; k * d * d],
        }
    }
}

impl StepFit {
    fn standardise(&self, x: &[f64], z: &mut [f64]) {
        for i in 0..x.len() {
            z[i] = (x[i] - self.mean[i]) / self.scale[i];
        }
    }

    /// Value, gradient and row-major Hessian at `x`.
    fn eval_full(
        &self,
        map: &dyn FeatureMap,
        x: &[f64],
        ws: &mut Workspace,
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> f64 {
        let d = x.len();
        self.standardise(x, &mut ws.z);
        map.eval(&ws.z, &mut ws.phi, Some((&mut ws.dphi, &mut ws.d2phi)));
        grad.fill(0.0);
        hess.fill(0.0);
        let mut v = 0.0;
        for (k, b) in self.coefficients.iter().enumerate() {
            v += b * ws.phi[k];
            for i in 0..d {
                grad[i] += b * ws.dphi[k * d + i] / self.scale[i];
                for j in 0..d {
                    hess[i * d + j] +=
                        b * ws.d2phi[(k * d + i) * d + j] / (self.scale[i] * self.scale[j]);
                }
            }
        }
        v
    }

    pub fn value(&self, spec: &ApproximatorSpec, x: &[f64]) -> f64 {
        let map = spec.map();
        let mut ws = Workspace::new(x.len(), self.coefficients.len());
        self.standardise(x, &mut ws.z);
        map.eval(&ws.z, &mut ws.phi, None);
        ws.phi
            .iter()
            .zip(&self.coefficients)
            .map(|(p, b)| p * b)
            .sum()
    }

    pub fn derivatives(&self, spec: &ApproximatorSpec, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let d = x.len();
        let mut ws = Workspace::new(d, self.coefficients.len());
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let v = self.eval_full(spec.map(), x, &mut ws, &mut g, &mut h);
        (v, g, h)
    }
}

/// Chunked sums so the result does not depend on the thread count.
fn chunked_sum<T, F>(n: usize, zero: T, f: F, add: impl Fn(&mut T, &T)) -> T
where
    T: Clone + Send + Sync,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<T> = starts
        .par_iter()
        .map(|&s| f(s..(s + CHUNK).min(n)))
        .collect();
    let mut total = zero;
    for p in &parts {
        add(&mut total, p);
    }
    total
}

fn fit(
    spec: &ApproximatorSpec,
    t: f64,
    xs: &[f64],
    ys: &[f64],
    d: usize,
    step: usize,
) -> Result<StepFit> {
    let n = ys.len();
    let map = spec.map();
    let k = map.len(d);
    let sums = chunked_sum(
        n,
        vec![0.0; 2 * d],
        |r| {
            let mut s = vec![0.0; 2 * d];
            for p in r {
                for i in 0..d {
                    let x = xs[p * d + i];
                    s[i] += x;
                    s[d + i] += x * x;
                }
            }
            s
        },
        |a, b| a.iter_mut().zip(b).for_each(|(a, b)| *a += b),
    );
    let mean: Vec<f64> = sums[..d].iter().map(|s| s / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|i| (sums[d + i] / n as f64 - mean[i] * mean[i]).max(0.0).sqrt())
        .collect();
    if scale.iter().any(|s| !(*s > 1e-12)) {
        return Err(Error::Solver {
            step,
            reason: "a state coordinate has no spread; regression is rank deficient \
                     (increase the initial spread)"
                .into(),
        });
    }
    let proto = StepFit {
        t,
        mean,
        scale,
        coefficients: vec![0.0; k],
    };
    // Gram matrix and right-hand side, packed as k×k followed by k.
    let acc = chunked_sum(
        n,
        vec![0.0; k * k + k],
        |r| {
            let mut a = vec![0.0; k * k + k];
            let mut z = vec![0.0; d];
            let mut phi = vec![0.0; k];
            for p in r {
                proto.standardise(&xs[p * d..(p + 1) * d], &mut z);
                map.eval(&z, &mut phi, None);
                for i in 0..k {
                    for j in i..k {
                        a[i * k + j] += phi[i] * phi[j];
                    }
                    a[k * k + i] += phi[i] * ys[p];
                }
            }
            a
        },
        |a, b| a.iter_mut().zip(b).for_each(|(a, b)| *a += b),
    );
    let mut gram = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = acc[i * k + j] / n as f64;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let rhs = DVector::from_iterator(k, acc[k * k..].iter().map(|v| v / n as f64));
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Solver {
            step,
            reason: format!(
                "regression is rank deficient (condition number {:e}); use more samples \
                 or a lower degree",
                hi / lo
            ),
        });
    }
    for i in 0..k {
        gram[(i, i)] += spec.ridge;
    }
    let beta = gram.cholesky().ok_or_else(|| Error::Solver {
        step,
        reason: "regression matrix is not positive definite".into(),
    })?;
    let beta = beta.solve(&rhs);
    Ok(StepFit {
        coefficients: beta.iter().copied().collect(),
        ..proto
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoBsdeSolution {
    pub y0: f64,
    pub z0: Vec<f64>,
    pub gamma0: Vec<f64>,
    /// `step_fits[n]` is the surrogate of `v(t_n, ·)`; the last entry is `g`'s fit.
    pub step_fits: Vec<StepFit>,
    pub terminal_mismatch: f64,
    pub n_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Ensemble mean of `X` at each coarse time.
    pub mean_path: Vec<Vec<f64>>,
    /// Worst-case parameter along `mean_path`, when the problem has a bracket.
    pub sigma_star: Option<Vec<f64>>,
    /// Plain ensemble mean of `g(X_N)`, useful as a zero-driver reference.
    pub terminal_mean: f64,
    pub terminal_std_error: f64,
}

impl TwoBsdeSolution {
    /// One header row and one data row:
    /// `y0,z0_0,...,terminal_mismatch,n_steps,n_samples,seed`.
    pub fn write_report<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let mut header = vec!["y0".to_string()];
        header.extend((0..self.z0.len()).map(|i| format!("z0_{i}")));
        header.extend(["terminal_mismatch", "n_steps", "n_samples", "seed"].map(String::from));
        wr.write_record(&header)?;
        let mut row = vec![self.y0.to_string()];
        row.extend(self.z0.iter().map(|z| z.to_string()));
        row.push(self.terminal_mismatch.to_string());
        row.push(self.n_steps.to_string());
        row.push(self.n_samples.to_string());
        row.push(self.seed.to_string());
        wr.write_record(&row)?;
        wr.flush()?;
        Ok(())
    }

    /// Per-step coefficients: `step,t,mean_*,scale_*,beta_*`.
    pub fn write_coefficients<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let d = self.z0.len();
        let k = self.step_fits.first().map_or(0, |f| f.coefficients.len());
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("mean_{i}")));
        header.extend((0..d).map(|i| format!("scale_{i}")));
        header.extend((0..k).map(|i| format!("beta_{i}")));
        wr.write_record(&header)?;
        for (n, f) in self.step_fits.iter().enumerate() {
            let mut row = vec![n.to_string(), f.t.to_string()];
            row.extend(
                f.mean
                    .iter()
                    .chain(&f.scale)
                    .chain(&f.coefficients)
                    .map(|v| v.to_string()),
            );
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// `t,sigma_star` along the ensemble mean path.
    pub fn write_sigma_star<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wr.write_record(["t", "sigma_star"])?;
        if let Some(s) = &self.sigma_star {
            for (fit, v) in self.step_fits.iter().zip(s) {
                wr.write_record([fit.t.to_string(), v.to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Forward ensemble at the coarse times, `states[n][p*d..]`.
fn forward_ensemble(
    problem: &TwoBsdeProblem,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let sys = problem.forward.as_ref();
    let d = sys.dim();
    let m = sys.noise_dim();
    let dt = problem.horizon / n_steps as f64;
    let sub = problem
        .max_forward_dt
        .map_or(1, |h| (dt / h).ceil().max(1.0) as usize);
    let h = dt / sub as f64;
    let sqrt_h = h.sqrt();
    let mut flat = vec![0.0; n_samples * (n_steps + 1) * d];
    let row = (n_steps + 1) * d;
    let failures: Vec<Option<(usize, usize)>> = flat
        .par_chunks_mut(row)
        .enumerate()
        .map(|(p, out)| {
            let mut rng = PathRng::new(seed, p as u64);
            let mut x: Vec<f64> = problem
                .x0
                .iter()
                .map(|x0| x0 + problem.initial_spread * rng.normal())
                .collect();
            out[..d].copy_from_slice(&x);
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * m];
            let mut dw = vec![0.0; m];
            for n in 0..n_steps {
                for _ in 0..sub {
                    sys.drift(&x, &mut b);
                    sys.diffusion(&x, &mut s);
                    rng.fill_normal(&mut dw);
                    let mut norm2 = 0.0;
                    for i in 0..d {
                        let mut dx = b[i] * h;
                        for j in 0..m {
                            dx += s[i * m + j] * dw[j] * sqrt_h;
                        }
                        x[i] += dx;
                        norm2 += x[i] * x[i];
                    }
                    if !(norm2.sqrt() <= BLOW_UP_NORM) {
                        return Some((p, n));
                    }
                }
                out[(n + 1) * d..(n + 2) * d].copy_from_slice(&x);
            }
            None
        })
        .collect();
    if let Some((path, step)) = failures.into_iter().flatten().next() {
        return Err(Error::Simulation { path, step });
    }
    let mut states = vec![vec![0.0; n_samples * d]; n_steps + 1];
    for p in 0..n_samples {
        for (n, st) in states.iter_mut().enumerate() {
            st[p * d..(p + 1) * d].copy_from_slice(&flat[p * row + n * d..p * row + (n + 1) * d]);
        }
    }
    Ok(states)
}

fn sigma_sq_trace(sys: &dyn SdeSystem, x: &[f64], hess: &[f64], s: &mut [f64]) -> f64 {
    let d = sys.dim();
    let m = sys.noise_dim();
    sys.diffusion(x, s);
    let mut tr = 0.0;
    for i in 0..d {
        for j in 0..d {
            let a: f64 = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            tr += hess[i * d + j] * a;
        }
    }
    tr
}

/// Solve the 2BSDE by backward regression; see the module documentation.
pub fn solve_2bsde(
    problem: &TwoBsdeProblem,
    approx: &ApproximatorSpec,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<TwoBsdeSolution> {
    let d = problem.dim();
    let k = approx.n_features(d);
    if n_steps < 2 {
        return Err(Error::config(format!(
            "need at least 2 time steps, got {n_steps}"
        )));
    }
    if n_samples < 10 * k {
        return Err(Error::config(format!(
            "need at least {} samples for {k} features, got {n_samples}",
            10 * k
        )));
    }
    if !(problem.initial_spread > 0.0) {
        return Err(Error::config("initial spread must be positive"));
    }
    let dt = problem.horizon / n_steps as f64;
    let states = forward_ensemble(problem, n_steps, n_samples, seed)?;
    let sys = problem.forward.as_ref();
    let m = sys.noise_dim();
    let map = approx.map();

    let mut y: Vec<f64> = states[n_steps]
        .chunks(d)
        .map(|x| (problem.terminal)(x))
        .collect();
    if let Some(p) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Solver {
            step: n_steps,
            reason: format!("terminal value is not finite on sample {p}"),
        });
    }
    let terminal_mean = y.iter().sum::<f64>() / n_samples as f64;
    let terminal_std_error = (y.iter().map(|v| (v - terminal_mean).powi(2)).sum::<f64>()
        / (n_samples as f64 - 1.0)
        / n_samples as f64)
        .sqrt();

    let mut fits = vec![fit(
        approx,
        problem.horizon,
        &states[n_steps],
        &y,
        d,
        n_steps,
    )?];
    for n in (0..n_steps).rev() {
        let t = n as f64 * dt;
        let next_fit = fits.last().unwrap();
        let (xs, xn) = (&states[n], &states[n + 1]);
        y.par_chunks_mut(CHUNK).enumerate().for_each(|(c, yc)| {
            let mut ws = Workspace::new(d, k);
            let mut g = vec![0.0; d];
            let mut hs = vec![0.0; d * d];
            let mut s = vec![0.0; d * m];
            for (off, yp) in yc.iter_mut().enumerate() {
                let p = c * CHUNK + off;
                let x = &xs[p * d..(p + 1) * d];
                next_fit.eval_full(map, x, &mut ws, &mut g, &mut hs);
                let dx: f64 = (0..d).map(|i| g[i] * (xn[p * d + i] - x[i])).sum();
                let tr = sigma_sq_trace(sys, x, &hs, &mut s);
                let f = (problem.driver)(t, x, *yp, &g, &hs);
                *yp = *yp - f * dt - dx - 0.5 * tr * dt;
            }
        });
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver {
                step: n,
                reason: "non-finite Y".into(),
            });
        }
        fits.push(fit(approx, t, xs, &y, d, n)?);
    }
    fits.reverse();
    let (y0, z0, gamma0) = fits[0].derivatives(approx, &problem.x0);
    if !y0.is_finite() {
        return Err(Error::Solver {
            step: 0,
            reason: "non-finite y0".into(),
        });
    }

    // Forward reconstruction from φ₀ through the same increments.
    let mismatch_sq = chunked_sum(
        n_samples,
        0.0,
        |r| {
            let mut ws = Workspace::new(d, k);
            let mut g = vec![0.0; d];
            let mut hs = vec![0.0; d * d];
            let mut s = vec![0.0; d * m];
            let mut acc = 0.0;
            for p in r {
                let mut yr = fits[0].eval_full(
                    map,
                    &states[0][p * d..(p + 1) * d],
                    &mut ws,
                    &mut g,
                    &mut hs,
                );
                for n in 0..n_steps {
                    let x = &states[n][p * d..(p + 1) * d];
                    let xn = &states[n + 1][p * d..(p + 1) * d];
                    fits[n + 1].eval_full(map, x, &mut ws, &mut g, &mut hs);
                    let dx: f64 = (0..d).map(|i| g[i] * (xn[i] - x[i])).sum();
                    let tr = sigma_sq_trace(sys, x, &hs, &mut s);
                    let f = (problem.driver)(n as f64 * dt, x, yr, &g, &hs);
                    yr += f * dt + dx + 0.5 * tr * dt;
                }
                acc += (yr - (problem.terminal)(&states[n_steps][p * d..(p + 1) * d])).powi(2);
            }
            acc
        },
        |a, b| *a += b,
    );
    let terminal_mismatch = (mismatch_sq / n_samples as f64).sqrt();

    let mean_path: Vec<Vec<f64>> = states
        .iter()
        .map(|st| {
            (0..d)
                .map(|i| st.iter().skip(i).step_by(d).sum::<f64>() / n_samples as f64)
                .collect()
        })
        .collect();
    let sigma_star = problem.bracket.as_ref().map(|br| {
        fits.iter()
            .zip(&mean_path)
            .map(|(f, x)| {
                let (_, g, h) = f.derivatives(approx, x);
                g_argmax(br(x, &g, &h), &problem.theta)
            })
            .collect()
    });

    Ok(TwoBsdeSolution {
        y0,
        z0,
        gamma0,
        step_fits: fits,
        terminal_mismatch,
        n_steps,
        n_samples,
        seed,
        mean_path,
        sigma_star,
        terminal_mean,
        terminal_std_error,
    })
}

/// Linear-quadratic data shared by the full and averaged models.
#[derive(Debug, Clone, Copy)]
pub enum LqModelRef<'a> {
    Full(&'a MultiscaleLQModel),
    Reduced(&'a ReducedLQModel),
}

impl<'a> From<&'a MultiscaleLQModel> for LqModelRef<'a> {
    fn from(m: &'a MultiscaleLQModel) -> Self {
        LqModelRef::Full(m)
    }
}

impl<'a> From<&'a ReducedLQModel> for LqModelRef<'a> {
    fn from(m: &'a ReducedLQModel) -> Self {
        LqModelRef::Reduced(m)
    }
}

struct LqData {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    q0: DMatrix<f64>,
    q1: DMatrix<f64>,
    horizon: f64,
    sigma: UncertaintyInterval,
}

impl LqModelRef<'_> {
    fn data(self) -> LqData {
        match self {
            LqModelRef::Full(m) => LqData {
                a: m.drift_matrix(),
                b: m.control_matrix(),
                c: m.noise_matrix(),
                q0: m.running_weight_full(),
                q1: m.terminal_weight_full(),
                horizon: m.horizon,
                sigma: m.sigma,
            },
            LqModelRef::Reduced(m) => LqData {
                a: m.a_bar.clone(),
                b: m.b_bar.clone(),
                c: m.c_bar.clone(),
                q0: m.q0.clone(),
                q1: m.q1.clone(),
                horizon: m.horizon,
                sigma: m.sigma,
            },
        }
    }
}

fn quad(q: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = q.nrows();
    (0..n)
        .map(|i| (0..n).map(|j| x[i] * q[(i, j)] * x[j]).sum::<f64>())
        .sum()
}

fn lq_bracket(cct: DMatrix<f64>) -> Bracket {
    Arc::new(move |_x, _z, s| {
        let d = cct.nrows();
        (0..d * d).map(|k| cct[(k / d, k % d)] * s[k]).sum()
    })
}

/// Driver of the LQ G-PDE:
/// `f = −[G(CCᵀ:S) + ⟨Ax, z⟩ − ½|Bᵀz|² + ½xᵀQ₀x]`.
pub fn make_lq_driver<'a>(model: impl Into<LqModelRef<'a>>) -> Driver {
    let LqData {
        a, b, c, q0, sigma, ..
    } = model.into().data();
    let bracket = lq_bracket(&c * c.transpose());
    Arc::new(move |_t, x, _y, z, s| {
        let d = a.nrows();
        let g = g_nonlinearity(bracket(x, z, s), &sigma);
        let ax_z: f64 = (0..d)
            .map(|i| z[i] * (0..d).map(|j| a[(i, j)] * x[j]).sum::<f64>())
            .sum();
        let btz2: f64 = (0..b.ncols())
            .map(|k| (0..d).map(|i| b[(i, k)] * z[i]).sum::<f64>().powi(2))
            .sum();
        -(g + ax_z - 0.5 * btz2 + 0.5 * quad(&q0, x))
    })
}

/// LQ value problem from `x0`, forward-simulated uncontrolled at the interval
/// midpoint.
pub fn make_lq_problem<'a>(
    model: impl Into<LqModelRef<'a>>,
    x0: Vec<f64>,
) -> Result<TwoBsdeProblem> {
    let model = model.into();
    let data = model.data();
    let driver = make_lq_driver(model);
    let forward = LinearSystem::new(data.a.clone(), &data.c * data.sigma.midpoint().sqrt())?;
    let q1 = data.q1.clone();
    let bracket = lq_bracket(&data.c * data.c.transpose());
    // resolve the fastest drift mode
    let stiff = data.a.amax();
    let problem = TwoBsdeProblem::new(
        Box::new(forward),
        driver,
        Arc::new(move |x| quad(&q1, x)),
        data.horizon,
        x0,
        data.sigma,
    )?
    .with_bracket(bracket);
    Ok(if stiff > 0.0 {
        problem.with_max_forward_dt(0.05 / stiff)
    } else {
        problem
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriadSystem {
    Full,
    Limit,
}

/// QoI problem `v(t, x) = worst-case E[X₁(T)]` for the triad, with the
/// interval `[λ̲², λ̄²]` inside `G`.
pub fn make_triad_qoi_problem(
    model: &TriadModel,
    which: TriadSystem,
    horizon: f64,
    x0: Vec<f64>,
) -> Result<TwoBsdeProblem> {
    let lam_sq = model.lambda.squared();
    let lambda_mid = model.lambda.midpoint();
    let terminal: Terminal = Arc::new(|x| x[0]);
    match which {
        TriadSystem::Full => {
            if x0.len() != 3 {
                return Err(Error::config(
                    "the full triad problem needs a 3-dimensional x0",
                ));
            }
            let m = *model;
            let inv_eps2 = 1.0 / (m.epsilon * m.epsilon);
            let bracket: Bracket = Arc::new(move |_x, _z, s| s[8] * inv_eps2);
            let br = bracket.clone();
            let driver: Driver = Arc::new(move |_t, x, _y, z, s| {
                let b = triad_full_drift(&m, [x[0], x[1], x[2]]);
                let adv = b[0] * z[0] + b[1] * z[1] + b[2] * z[2];
                -(g_nonlinearity(br(x, z, s), &lam_sq) + adv)
            });
            let forward = TriadFullSystem {
                model: m,
                lambda_value: lambda_mid,
            };
            Ok(
                TwoBsdeProblem::new(Box::new(forward), driver, terminal, horizon, x0, lam_sq)?
                    .with_max_forward_dt(1e-2 * m.epsilon * m.epsilon)
                    .with_bracket(bracket),
            )
        }
        TriadSystem::Limit => {
            if x0.len() != 2 {
                return Err(Error::config(
                    "the triad limit problem needs a 2-dimensional x0",
                ));
            }
            let limit: TriadLimit = model.limit(lambda_mid);
            let bracket: Bracket = Arc::new(move |x, z, s| {
                let u = limit.diffusion_unit([x[0], x[1]]);
                let f1 = limit.noise_induced_drift_unit([x[0], x[1]]);
                u[0] * u[0] * s[0]
                    + u[0] * u[1] * (s[1] + s[2])
                    + u[1] * u[1] * s[3]
                    + f1[0] * z[0]
                    + f1[1] * z[1]
            });
            let br = bracket.clone();
            let driver: Driver = Arc::new(move |_t, x, _y, z, s| {
                let f2 = limit.parameter_free_drift([x[0], x[1]]);
                -(g_nonlinearity(br(x, z, s), &lam_sq) + f2[0] * z[0] + f2[1] * z[1])
            });
            Ok(TwoBsdeProblem::new(
                Box::new(TriadLimitSystem(limit)),
                driver,
                terminal,
                horizon,
                x0,
                lam_sq,
            )?
            .with_bracket(bracket))
        }
    }
}
