//! Slow-fast model definitions and their closed-form reductions.
//!
//! Three families are bundled:
//!
//! - block-structured linear-quadratic systems (slow `r`, fast `u`) and the
//!   averaged reduced system obtained by eliminating the fast block,
//! - the triad climate model with three bilinearly coupled modes and its
//!   homogenised two-mode limit with multiplicative noise,
//! - the pitchfork averaging example whose limit vector field changes its
//!   fixed-point structure at `θ = 1/3`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sublinear::UncertaintyInterval;

/// Hurwitz test threshold on the largest real part of the eigenvalues.
const HURWITZ_TOL: f64 = -1e-10;
/// Condition number above which `A22` is treated as numerically singular.
const MAX_CONDITION: f64 = 1e12;

/// The blocks of `A`, `B` and `C` for a state split `x = (r, u)` with
/// `r ∈ R^{n_s}` slow and `u ∈ R^{n_f}` fast.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrices {
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
}

impl BlockMatrices {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a11: DMatrix<f64>,
        a12: DMatrix<f64>,
        a21: DMatrix<f64>,
        a22: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        c1: DMatrix<f64>,
        c2: DMatrix<f64>,
    ) -> Result<Self> {
        let ns = a11.nrows();
        let nf = a22.nrows();
        let k = b1.ncols();
        let m = c1.ncols();
        let shape_ok = a11.shape() == (ns, ns)
            && a12.shape() == (ns, nf)
            && a21.shape() == (nf, ns)
            && a22.shape() == (nf, nf)
            && b1.shape() == (ns, k)
            && b2.shape() == (nf, k)
            && c1.shape() == (ns, m)
            && c2.shape() == (nf, m);
        if !shape_ok || ns == 0 || nf == 0 {
            return Err(Error::config("block matrix dimensions are inconsistent"));
        }
        let max_re = a22
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        if !(max_re < HURWITZ_TOL) {
            return Err(Error::config(format!(
                "A22 is not Hurwitz (largest eigenvalue real part {max_re})"
            )));
        }
        Ok(Self {
            a11,
            a12,
            a21,
            a22,
            b1,
            b2,
            c1,
            c2,
        })
    }

    /// Scalar blocks (one slow, one fast, one control, one noise channel).
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(
        a11: f64,
        a12: f64,
        a21: f64,
        a22: f64,
        b1: f64,
        b2: f64,
        c1: f64,
        c2: f64,
    ) -> Result<Self> {
        let s = |v| DMatrix::from_element(1, 1, v);
        Self::new(s(a11), s(a12), s(a21), s(a22), s(b1), s(b2), s(c1), s(c2))
    }

    pub fn slow_dim(&self) -> usize {
        self.a11.nrows()
    }

    pub fn fast_dim(&self) -> usize {
        self.a22.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b1.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.c1.ncols()
    }
}

/// How the fast block is scaled with `ε`.
///
/// `Sqrt` couples through `ε^{-1/2}` and relaxes on `ε^{-1}`; `Linear` uses
/// `ε^{-1}` and `ε^{-2}`, i.e. the `Sqrt` form with `ε` replaced by `ε²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastScaling {
    Sqrt,
    Linear,
}

impl FastScaling {
    pub fn exponent(self) -> u32 {
        match self {
            FastScaling::Sqrt => 1,
            FastScaling::Linear => 2,
        }
    }

    pub fn from_exponent(p: u32) -> Result<Self> {
        match p {
            1 => Ok(FastScaling::Sqrt),
            2 => Ok(FastScaling::Linear),
            _ => Err(Error::config(format!(
                "fast scaling exponent must be 1 or 2, got {p}"
            ))),
        }
    }

    /// `(coupling factor, relaxation factor)` = `(ε^{-p/2}, ε^{-p})`.
    pub fn factors(self, epsilon: f64) -> (f64, f64) {
        let p = self.exponent() as i32;
        let relax = epsilon.powi(-p);
        (relax.sqrt(), relax)
    }
}

/// Controlled linear slow-fast system
/// `dX = (A^ε X + B^ε α) dt + √σ C^ε dW` with quadratic cost
/// `E[½∫ (rᵀQ0 r + |α|²) ds + rᵀQ1 r at T]`.
///
/// The terminal cost carries no `½`, so `Q1 = 1` in one slow dimension gives
/// the terminal condition `v(T, x) = r²`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleLQModel {
    pub blocks: BlockMatrices,
    pub epsilon: f64,
    pub scaling: FastScaling,
    pub q0: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub horizon: f64,
    pub sigma: UncertaintyInterval,
}

fn check_psd(name: &str, q: &DMatrix<f64>, n: usize) -> Result<()> {
    if q.shape() != (n, n) {
        return Err(Error::config(format!("{name} must be {n}x{n}")));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
        return Err(Error::config(format!("{name} must be symmetric")));
    }
    let min_eig = SymmetricEigen::new(q.clone()).eigenvalues.min();
    if min_eig < -1e-12 * q.amax().max(1.0) {
        return Err(Error::config(format!(
            "{name} must be positive semi-definite"
        )));
    }
    Ok(())
}

impl MultiscaleLQModel {
    pub fn new(
        blocks: BlockMatrices,
        epsilon: f64,
        scaling: FastScaling,
        q0: DMatrix<f64>,
        q1: DMatrix<f64>,
        horizon: f64,
        sigma: UncertaintyInterval,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let ns = blocks.slow_dim();
        check_psd("Q0", &q0, ns)?;
        check_psd("Q1", &q1, ns)?;
        Ok(Self {
            blocks,
            epsilon,
            scaling,
            q0,
            q1,
            horizon,
            sigma,
        })
    }

    /// The two-dimensional regulator benchmark: `A11 = -2, A12 = -1, A21 = 1,
    /// A22 = -2, B1 = 0.1, B2 = 2`, noise `√σ B^ε`, fast block scaled by
    /// `ε^{-1}`/`ε^{-2}`, no running cost, terminal cost `r²`.
    pub fn regulator_benchmark(
        epsilon: f64,
        sigma: UncertaintyInterval,
        horizon: f64,
    ) -> Result<Self> {
        let blocks = BlockMatrices::scalar(-2.0, -1.0, 1.0, -2.0, 0.1, 2.0, 0.1, 2.0)?;
        Self::new(
            blocks,
            epsilon,
            FastScaling::Linear,
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            horizon,
            sigma,
        )
    }

    pub fn slow_dim(&self) -> usize {
        self.blocks.slow_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.blocks.slow_dim() + self.blocks.fast_dim()
    }

    fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
        out.rows_mut(0, top.nrows()).copy_from(top);
        out.rows_mut(top.nrows(), bottom.nrows())
            .copy_from(&(bottom * scale));
        out
    }

    /// `A^ε` with the fast rows/columns scaled.
    pub fn drift_matrix(&self) -> DMatrix<f64> {
        let (c, r) = self.scaling.factors(self.epsilon);
        let b = &self.blocks;
        let (ns, nf) = (b.slow_dim(), b.fast_dim());
        let mut a = DMatrix::zeros(ns + nf, ns + nf);
        a.view_mut((0, 0), (ns, ns)).copy_from(&b.a11);
        a.view_mut((0, ns), (ns, nf)).copy_from(&(&b.a12 * c));
        a.view_mut((ns, 0), (nf, ns)).copy_from(&(&b.a21 * c));
        a.view_mut((ns, ns), (nf, nf)).copy_from(&(&b.a22 * r));
        a
    }

    /// `B^ε`.
    pub fn control_matrix(&self) -> DMatrix<f64> {
        let (c, _) = self.scaling.factors(self.epsilon);
        Self::stack_rows(&self.blocks.b1, &self.blocks.b2, c)
    }

    /// `C^ε` without the `√σ` factor.
    pub fn noise_matrix(&self) -> DMatrix<f64> {
        let (c, _) = self.scaling.factors(self.epsilon);
        Self::stack_rows(&self.blocks.c1, &self.blocks.c2, c)
    }

    /// `Q1` embedded in the full state (zeros on the fast block).
    pub fn terminal_weight_full(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let ns = self.slow_dim();
        let mut q = DMatrix::zeros(n, n);
        q.view_mut((0, 0), (ns, ns)).copy_from(&self.q1);
        q
    }

    pub fn running_weight_full(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let ns = self.slow_dim();
        let mut q = DMatrix::zeros(n, n);
        q.view_mut((0, 0), (ns, ns)).copy_from(&self.q0);
        q
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(
            self.blocks.clone(),
            epsilon,
            self.scaling,
            self.q0.clone(),
            self.q1.clone(),
            self.horizon,
            self.sigma,
        )
    }

    pub fn with_sigma(&self, sigma: UncertaintyInterval) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }
}

/// Averaged slow dynamics `dR = (Ā R + B̄ α) dt + √σ C̄ dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedLQModel {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    /// `D̄ = (I, -A12 A22⁻¹)`, mapping full-state noise to the reduced noise.
    pub d_bar: DMatrix<f64>,
    pub q0: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub horizon: f64,
    pub sigma: UncertaintyInterval,
}

impl ReducedLQModel {
    pub fn dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn with_sigma(&self, sigma: UncertaintyInterval) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }
}

/// Eliminate the fast block: `Ā = A11 − A12 A22⁻¹ A21` and likewise for `B̄`, `C̄`.
pub fn reduce_lq(model: &MultiscaleLQModel) -> Result<ReducedLQModel> {
    let b = &model.blocks;
    let sv = b.a22.clone().svd(false, false).singular_values;
    let cond = sv.max() / sv.min();
    if !(cond.is_finite() && cond <= MAX_CONDITION) {
        return Err(Error::Reduction(format!(
            "A22 is numerically singular (condition number {cond:e})"
        )));
    }
    // M = A12 A22⁻¹, obtained from A22ᵀ Mᵀ = A12ᵀ.
    let mt = b
        .a22
        .transpose()
        .lu()
        .solve(&b.a12.transpose())
        .ok_or_else(|| Error::Reduction("A22 is singular".into()))?;
    let m = mt.transpose();
    let ns = b.slow_dim();
    let nf = b.fast_dim();
    let mut d_bar = DMatrix::zeros(ns, ns + nf);
    d_bar.view_mut((0, 0), (ns, ns)).fill_with_identity();
    d_bar.view_mut((0, ns), (ns, nf)).copy_from(&(-&m));
    Ok(ReducedLQModel {
        a_bar: &b.a11 - &m * &b.a21,
        b_bar: &b.b1 - &m * &b.b2,
        c_bar: &b.c1 - &m * &b.c2,
        d_bar,
        q0: model.q0.clone(),
        q1: model.q1.clone(),
        horizon: model.horizon,
        sigma: model.sigma,
    })
}

fn check_triad_coefficients(a1: f64, a2: f64, a3: f64) -> Result<()> {
    if !(a1.is_finite() && a2.is_finite() && a3.is_finite()) || (a1 + a2 + a3).abs() > 1e-12 {
        return Err(Error::config(format!(
            "triad coefficients must satisfy A1 + A2 + A3 = 0, got ({a1}, {a2}, {a3})"
        )));
    }
    Ok(())
}

/// Three-mode triad system `dX = ε⁻² L(X) dt + ε⁻¹ B(X, X) dt + ε⁻¹ Σ dW`
/// with `X = (r1, r2, u)`, `L(x) = -(0, 0, u)`,
/// `B(x, x) = (A1 r2 u, A2 r1 u, A3 r1 r2)` and `Σ = (0, 0, λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriadModel {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub lambda: UncertaintyInterval,
    pub epsilon: f64,
    pub gamma: f64,
}

impl TriadModel {
    pub fn new(
        a1: f64,
        a2: f64,
        a3: f64,
        lambda: UncertaintyInterval,
        epsilon: f64,
        gamma: f64,
    ) -> Result<Self> {
        check_triad_coefficients(a1, a2, a3)?;
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self {
            a1,
            a2,
            a3,
            lambda,
            epsilon,
            gamma,
        })
    }

    /// The limit system at a fixed noise level.
    pub fn limit(&self, lambda_value: f64) -> TriadLimit {
        TriadLimit {
            a1: self.a1,
            a2: self.a2,
            a3: self.a3,
            lambda_value,
            gamma: self.gamma,
        }
    }
}

/// Homogenised triad limit `dR = f(R) dt + σ(R) dW` at a fixed noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriadLimit {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub lambda_value: f64,
    pub gamma: f64,
}

impl TriadLimit {
    pub fn new(a1: f64, a2: f64, a3: f64, lambda_value: f64, gamma: f64) -> Result<Self> {
        check_triad_coefficients(a1, a2, a3)?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self {
            a1,
            a2,
            a3,
            lambda_value,
            gamma,
        })
    }

    /// `f₁ / λ² = A1 A2 r`: the noise-induced part of the drift per unit `λ²`.
    pub fn noise_induced_drift_unit(&self, r: [f64; 2]) -> [f64; 2] {
        let k = self.a1 * self.a2;
        [k * r[0], k * r[1]]
    }

    /// `f₂ = f − f₁/2 = (A1 A3 r1 r2², A2 A3 r2 r1²)`, independent of `λ`.
    pub fn parameter_free_drift(&self, r: [f64; 2]) -> [f64; 2] {
        [
            self.a1 * self.a3 * r[0] * r[1] * r[1],
            self.a2 * self.a3 * r[1] * r[0] * r[0],
        ]
    }

    /// `σ(r) / λ = (A1 r2, A2 r1) / γ`.
    pub fn diffusion_unit(&self, r: [f64; 2]) -> [f64; 2] {
        [self.a1 * r[1] / self.gamma, self.a2 * r[0] / self.gamma]
    }
}

/// `f(r) = (A1 r1 (A3 r2² + λ²A2/2), A2 r2 (A3 r1² + λ²A1/2))`.
pub fn triad_limit_drift(limit: &TriadLimit, r: [f64; 2]) -> [f64; 2] {
    let l2 = limit.lambda_value * limit.lambda_value;
    [
        limit.a1 * r[0] * (limit.a3 * r[1] * r[1] + 0.5 * l2 * limit.a2),
        limit.a2 * r[1] * (limit.a3 * r[0] * r[0] + 0.5 * l2 * limit.a1),
    ]
}

/// `σ(r) = (λ/γ) (A1 r2, A2 r1)`, the coefficient of one scalar Brownian increment.
pub fn triad_limit_diffusion(limit: &TriadLimit, r: [f64; 2]) -> [f64; 2] {
    let u = limit.diffusion_unit(r);
    [limit.lambda_value * u[0], limit.lambda_value * u[1]]
}

/// Drift `ε⁻² L(x) + ε⁻¹ B(x, x)` of the full triad system.
pub fn triad_full_drift(model: &TriadModel, x: [f64; 3]) -> [f64; 3] {
    let [r1, r2, u] = x;
    let e1 = 1.0 / model.epsilon;
    let e2 = e1 * e1;
    [
        e1 * model.a1 * r2 * u,
        e1 * model.a2 * r1 * u,
        -e2 * u + e1 * model.a3 * r1 * r2,
    ]
}

/// `F(r, θ) = −r³ + r(1 − 3θ)`.
pub fn pitchfork_limit_vector_field(theta: f64, r: f64) -> f64 {
    -r * r * r + r * (1.0 - 3.0 * theta)
}

/// Real roots of `F(·, θ)` in increasing order.
pub fn pitchfork_roots(theta: f64) -> Vec<f64> {
    let c = 1.0 - 3.0 * theta;
    if c > 0.0 {
        let s = c.sqrt();
        vec![-s, 0.0, s]
    } else {
        vec![0.0]
    }
}

/// Whether the fixed point `r` of `F(·, θ)` is asymptotically stable.
///
/// Uses the sign of `F′(r)`; a degenerate root (`F′ = 0`, only at `θ = 1/3`)
/// is classified by the sign change of `F` across it.
pub fn pitchfork_root_is_stable(theta: f64, r: f64) -> bool {
    let slope = -3.0 * r * r + 1.0 - 3.0 * theta;
    if slope.abs() > 1e-12 {
        return slope < 0.0;
    }
    let h = 1e-4;
    pitchfork_limit_vector_field(theta, r + h) < 0.0
        && pitchfork_limit_vector_field(theta, r - h) > 0.0
}

/// Slow-fast averaging example `dR = (R − U³) dt`,
/// `dU = ε⁻¹ (R − U) dt + √(2θ/ε) dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchforkModel {
    pub theta: f64,
    pub epsilon: f64,
}

impl PitchforkModel {
    pub fn new(theta: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::config(format!(
                "theta must lie in [0, 1], got {theta}"
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { theta, epsilon })
    }

    pub fn full_drift(&self, x: [f64; 2]) -> [f64; 2] {
        let [r, u] = x;
        [r - u * u * u, (r - u) / self.epsilon]
    }

    pub fn fast_noise(&self) -> f64 {
        (2.0 * self.theta / self.epsilon).sqrt()
    }

    pub fn limit_drift(&self, r: f64) -> f64 {
        pitchfork_limit_vector_field(self.theta, r)
    }
}

/// `I(r) = A1 r2² − A2 r1²`, conserved by the triad dynamics.
pub fn conserved_quantity(a1: f64, a2: f64, r: [f64; 2]) -> f64 {
    a1 * r[1] * r[1] - a2 * r[0] * r[0]
}

/// The four nonzero equilibria `(±λ√(A1/(2|A3|)), ±λ√(A2/(2|A3|)))`, for
/// `A1, A2 > 0 > A3`. Order: `(+,+), (+,−), (−,+), (−,−)`.
pub fn triad_equilibria(a1: f64, a2: f64, a3: f64, lambda_value: f64) -> Result<[[f64; 2]; 4]> {
    if !(a1 > 0.0 && a2 > 0.0 && a3 < 0.0) {
        return Err(Error::Domain(format!(
            "equilibria need A1 > 0, A2 > 0, A3 < 0, got ({a1}, {a2}, {a3})"
        )));
    }
    let p = lambda_value * (a1 / (2.0 * a3.abs())).sqrt();
    let q = lambda_value * (a2 / (2.0 * a3.abs())).sqrt();
    Ok([[p, q], [p, -q], [-p, q], [-p, -q]])
}
