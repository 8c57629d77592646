//! Explicit finite differences for G-HJB equations in one and two dimensions.
//!
//! The solved equation is
//!
//! ```text
//! ∂v/∂t + G(a₀:∇²v + ⟨∇v, b₁⟩) + ⟨∇v, b₀⟩ − ½|Bᵀ∇v|² + ½q₀ = 0,   v(T, ·) = g,
//! ```
//!
//! where `G(y) = max_{θ∈[θ̲,θ̄]} θy/2`. The bracket `a₀:∇²v + ⟨∇v, b₁⟩` holds
//! every term that scales with the uncertain parameter, with the parameter
//! itself factored out. For the linear-quadratic problems `a₀ = CCᵀ` and
//! `b₁ = 0`; for the triad limit both the diffusion and the noise-induced
//! drift scale with `λ²`, so the interval passed in is `[λ̲², λ̄²]`.
//!
//! Second derivatives use central differences. Drift terms use central
//! differences where the cell Péclet condition `|b|Δx ≤ θ̲ a_kk` keeps the
//! scheme monotone and first-order upwinding elsewhere. The control term is treated as the drift `B c*` with
//! `c* = −Bᵀ∇v` (central gradient) plus the cost `½|c*|²`. Outside the grid,
//! values are extended by quadratic extrapolation, which makes the boundary
//! second differences one-sided.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{MultiscaleLQModel, ReducedLQModel, TriadLimit};
use crate::sublinear::{g_argmax, g_nonlinearity, UncertaintyInterval};

/// Safety factor in the explicit stability bound.
pub const CFL_SAFETY: f64 = 0.9;
const MIN_CELLS: usize = 8;

type PointFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n_cells: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n_cells: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!(
                "axis requires lo < hi, got [{lo}, {hi}]"
            )));
        }
        if n_cells < MIN_CELLS {
            return Err(Error::config(format!(
                "axis needs at least {MIN_CELLS} cells, got {n_cells}"
            )));
        }
        Ok(Self { lo, hi, n_cells })
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.n_cells as f64
    }

    pub fn nodes(&self) -> usize {
        self.n_cells + 1
    }

    /// The same axis with twice as many cells.
    pub fn refined(&self) -> Self {
        Self {
            n_cells: 2 * self.n_cells,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
    pub dt: f64,
    pub horizon: f64,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>, dt: f64, horizon: f64) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::config(format!(
                "finite-difference grids cover 1 or 2 dimensions, got {}",
                axes.len()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(dt > 0.0 && dt <= horizon) {
            return Err(Error::config(format!(
                "pde time step must lie in (0, T], got {dt}"
            )));
        }
        Ok(Self { axes, dt, horizon })
    }

    /// A grid whose time step is `CFL_SAFETY / rate` for the largest explicit
    /// rate estimated from the problem coefficients. The control drift is
    /// estimated from the terminal gradient with a factor `control_margin`.
    pub fn with_stable_dt(
        axes: Vec<Axis>,
        horizon: f64,
        problem: &GhjbProblem,
        theta: &UncertaintyInterval,
        control_margin: f64,
    ) -> Result<Self> {
        let probe = Self::new(axes, horizon, horizon)?;
        let mesh = Mesh::new(&probe);
        let coeffs = Coefficients::build(problem, &mesh)?;
        let rate = coeffs.max_rate(&mesh, theta, problem, control_margin);
        let dt = if rate > 0.0 {
            CFL_SAFETY / rate
        } else {
            horizon
        };
        // round to a whole number of steps
        let n = (horizon / dt).ceil().max(1.0);
        Self::new(probe.axes, horizon / n, horizon)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps() as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.nodes()).product()
    }

    /// Coordinates of node `k` (first axis varies fastest).
    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut rem = node;
        self.axes
            .iter()
            .map(|a| {
                let i = rem % a.nodes();
                rem /= a.nodes();
                a.lo + i as f64 * a.dx()
            })
            .collect()
    }
}

/// G-HJB problem data; see the module documentation for the equation.
pub struct GhjbProblem {
    dim: usize,
    drift: PointFn,
    bracket_diffusion: PointFn,
    bracket_drift: Option<PointFn>,
    control: Option<DMatrix<f64>>,
    running_cost: Option<ScalarFn>,
    terminal: ScalarFn,
}

impl GhjbProblem {
    /// `drift` writes `b₀(x)`; `bracket_diffusion` writes the row-major
    /// symmetric `d×d` matrix `a₀(x)`.
    pub fn new(
        dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        bracket_diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            drift: Box::new(drift),
            bracket_diffusion: Box::new(bracket_diffusion),
            bracket_drift: None,
            control: None,
            running_cost: None,
            terminal: Box::new(terminal),
        }
    }

    /// Parameter-scaled drift `b₁(x)` entering inside `G`.
    pub fn with_bracket_drift(
        mut self,
        f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.bracket_drift = Some(Box::new(f));
        self
    }

    /// Control matrix `B` (`d×k`), contributing `−½|Bᵀ∇v|²`.
    pub fn with_control(mut self, b: DMatrix<f64>) -> Self {
        self.control = Some(b);
        self
    }

    /// Running cost `q₀(x)`, entering as `½q₀`.
    pub fn with_running_cost(mut self, q0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.running_cost = Some(Box::new(q0));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    /// The parameter-free bracket `a₀:H + ⟨p, b₁⟩` at `x` for gradient `p`
    /// and row-major Hessian `h`.
    pub fn bracket(&self, x: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
        let d = self.dim;
        let mut a = vec![0.0; d * d];
        (self.bracket_diffusion)(x, &mut a);
        let mut s: f64 = a.iter().zip(hess).map(|(a, h)| a * h).sum();
        if let Some(b1) = &self.bracket_drift {
            let mut b = vec![0.0; d];
            b1(x, &mut b);
            s += b.iter().zip(grad).map(|(b, p)| b * p).sum::<f64>();
        }
        s
    }

    fn quadratic_form(q: &DMatrix<f64>, x: &[f64]) -> f64 {
        let n = q.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += x[i] * q[(i, j)] * x[j];
            }
        }
        s
    }

    fn linear_problem(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        b: DMatrix<f64>,
        q0: DMatrix<f64>,
        q1: DMatrix<f64>,
    ) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || d > 2 {
            return Err(Error::config(format!(
                "finite differences cover 1 or 2 state dimensions, got {d}"
            )));
        }
        let cct = &c * c.transpose();
        let has_cost = q0.amax() > 0.0;
        let mut p = Self::new(
            d,
            move |x, out| {
                for i in 0..d {
                    out[i] = (0..d).map(|j| a[(i, j)] * x[j]).sum();
                }
            },
            move |_x, out| {
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = cct[(i, j)];
                    }
                }
            },
            move |x| Self::quadratic_form(&q1, x),
        )
        .with_control(b);
        if has_cost {
            p = p.with_running_cost(move |x| Self::quadratic_form(&q0, x));
        }
        Ok(p)
    }

    /// The full LQ G-HJB in the state `(r, u)`; the uncertain parameter is `σ`.
    pub fn lq_full(model: &MultiscaleLQModel) -> Result<Self> {
        Self::linear_problem(
            model.drift_matrix(),
            model.noise_matrix(),
            model.control_matrix(),
            model.running_weight_full(),
            model.terminal_weight_full(),
        )
    }

    /// The averaged LQ G-HJB in the slow state `r`.
    pub fn lq_reduced(model: &ReducedLQModel) -> Result<Self> {
        Self::linear_problem(
            model.a_bar.clone(),
            model.c_bar.clone(),
            model.b_bar.clone(),
            model.q0.clone(),
            model.q1.clone(),
        )
    }

    /// Worst-case mean of `R₁(T)` for the triad limit; solve with the
    /// interval `[λ̲², λ̄²]`.
    pub fn triad_limit_qoi(limit: &TriadLimit) -> Self {
        let l = *limit;
        Self::new(
            2,
            move |x, out| out.copy_from_slice(&l.parameter_free_drift([x[0], x[1]])),
            move |x, out| {
                let s = l.diffusion_unit([x[0], x[1]]);
                out[0] = s[0] * s[0];
                out[1] = s[0] * s[1];
                out[2] = s[1] * s[0];
                out[3] = s[1] * s[1];
            },
            |x| x[0],
        )
        .with_bracket_drift(move |x, out| {
            out.copy_from_slice(&l.noise_induced_drift_unit([x[0], x[1]]))
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Mesh {
    d: usize,
    n: [usize; 2],
    lo: [f64; 2],
    dx: [f64; 2],
}

impl Mesh {
    fn new(grid: &GridSpec) -> Self {
        let mut n = [1, 1];
        let mut lo = [0.0; 2];
        let mut dx = [1.0; 2];
        for (k, a) in grid.axes.iter().enumerate() {
            n[k] = a.nodes();
            lo[k] = a.lo;
            dx[k] = a.dx();
        }
        Self {
            d: grid.dim(),
            n,
            lo,
            dx,
        }
    }

    fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    fn split(&self, node: usize) -> (isize, isize) {
        ((node % self.n[0]) as isize, (node / self.n[0]) as isize)
    }

    fn coords(&self, node: usize, out: &mut [f64]) {
        let (i, j) = self.split(node);
        out[0] = self.lo[0] + i as f64 * self.dx[0];
        if self.d == 2 {
            out[1] = self.lo[1] + j as f64 * self.dx[1];
        }
    }

    /// Value at `(i, j)`, quadratically extrapolated outside the grid.
    fn get(&self, v: &[f64], i: isize, j: isize) -> f64 {
        let (n0, n1) = (self.n[0] as isize, self.n[1] as isize);
        if i < 0 {
            let k = i + 1;
            return 3.0 * self.get(v, k, j) - 3.0 * self.get(v, k + 1, j) + self.get(v, k + 2, j);
        }
        if i >= n0 {
            let k = i - 1;
            return 3.0 * self.get(v, k, j) - 3.0 * self.get(v, k - 1, j) + self.get(v, k - 2, j);
        }
        if j < 0 {
            let k = j + 1;
            return 3.0 * self.get(v, i, k) - 3.0 * self.get(v, i, k + 1) + self.get(v, i, k + 2);
        }
        if j >= n1 {
            let k = j - 1;
            return 3.0 * self.get(v, i, k) - 3.0 * self.get(v, i, k - 1) + self.get(v, i, k - 2);
        }
        v[(i + j * n0) as usize]
    }

    fn shifted(&self, v: &[f64], i: isize, j: isize, axis: usize, s: isize) -> f64 {
        if axis == 0 {
            self.get(v, i + s, j)
        } else {
            self.get(v, i, j + s)
        }
    }

    /// Central gradient, row-major Hessian and one-sided differences at a node.
    fn stencil(&self, v: &[f64], node: usize) -> Stencil {
        let (i, j) = self.split(node);
        let c = self.get(v, i, j);
        let mut st = Stencil::default();
        for k in 0..self.d {
            let p = self.shifted(v, i, j, k, 1);
            let m = self.shifted(v, i, j, k, -1);
            let h = self.dx[k];
            st.fwd[k] = (p - c) / h;
            st.bwd[k] = (c - m) / h;
            st.central[k] = (p - m) / (2.0 * h);
            st.hess[k * self.d + k] = (p - 2.0 * c + m) / (h * h);
        }
        if self.d == 2 {
            let pp = self.get(v, i + 1, j + 1);
            let pm = self.get(v, i + 1, j - 1);
            let mp = self.get(v, i - 1, j + 1);
            let mm = self.get(v, i - 1, j - 1);
            let x = (pp - pm - mp + mm) / (4.0 * self.dx[0] * self.dx[1]);
            st.hess[1] = x;
            st.hess[2] = x;
        }
        st
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Stencil {
    fwd: [f64; 2],
    bwd: [f64; 2],
    central: [f64; 2],
    hess: [f64; 4],
}

impl Stencil {
    fn upwind(&self, k: usize, velocity: f64) -> f64 {
        if velocity > 0.0 {
            self.fwd[k]
        } else {
            self.bwd[k]
        }
    }
}

/// Coefficients sampled once on every node (the problems are autonomous).
struct Coefficients {
    drift: Vec<[f64; 2]>,
    diffusion: Vec<[f64; 4]>,
    bracket_drift: Option<Vec<[f64; 2]>>,
    running: Option<Vec<f64>>,
    control: Option<DMatrix<f64>>,
}

impl Coefficients {
    fn build(problem: &GhjbProblem, mesh: &Mesh) -> Result<Self> {
        let d = mesh.d;
        if problem.dim != d {
            return Err(Error::config(format!(
                "problem dimension {} does not match grid dimension {d}",
                problem.dim
            )));
        }
        if let Some(b) = &problem.control {
            if b.nrows() != d {
                return Err(Error::config("control matrix has the wrong number of rows"));
            }
        }
        let mut x = [0.0; 2];
        let mut drift = Vec::with_capacity(mesh.len());
        let mut diffusion = Vec::with_capacity(mesh.len());
        let mut bracket_drift = problem
            .bracket_drift
            .as_ref()
            .map(|_| Vec::with_capacity(mesh.len()));
        let mut running = problem
            .running_cost
            .as_ref()
            .map(|_| Vec::with_capacity(mesh.len()));
        for node in 0..mesh.len() {
            mesh.coords(node, &mut x);
            let xs = &x[..d];
            let mut b = [0.0; 2];
            (problem.drift)(xs, &mut b[..d]);
            drift.push(b);
            let mut a = [0.0; 4];
            (problem.bracket_diffusion)(xs, &mut a[..d * d]);
            diffusion.push(a);
            if let (Some(f), Some(out)) = (&problem.bracket_drift, bracket_drift.as_mut()) {
                let mut b1 = [0.0; 2];
                f(xs, &mut b1[..d]);
                out.push(b1);
            }
            if let (Some(q), Some(out)) = (&problem.running_cost, running.as_mut()) {
                out.push(q(xs));
            }
        }
        Ok(Self {
            drift,
            diffusion,
            bracket_drift,
            running,
            control: problem.control.clone(),
        })
    }

    /// Optimal control `c* = −Bᵀp` and the induced drift `B c*`.
    fn control_drift(&self, p: &[f64; 2], d: usize) -> ([f64; 2], f64) {
        let mut out = [0.0; 2];
        let mut cost = 0.0;
        if let Some(b) = &self.control {
            for col in 0..b.ncols() {
                let c: f64 = -(0..d).map(|i| b[(i, col)] * p[i]).sum::<f64>();
                cost += 0.5 * c * c;
                for (i, o) in out.iter_mut().enumerate().take(d) {
                    *o += b[(i, col)] * c;
                }
            }
        }
        (out, cost)
    }

    /// Explicit rate `Σ θ̄ a_kk/Δx² + Σ |drift_k|/Δx` at a node.
    fn rate(&self, mesh: &Mesh, node: usize, theta_hi: f64, ctrl: &[f64; 2]) -> f64 {
        let d = mesh.d;
        let mut r = 0.0;
        for k in 0..d {
            let h = mesh.dx[k];
            r += theta_hi * self.diffusion[node][k * d + k].abs() / (h * h);
            r += (self.drift[node][k] + ctrl[k]).abs() / h;
            if let Some(b1) = &self.bracket_drift {
                r += 0.5 * theta_hi * b1[node][k].abs() / h;
            }
        }
        r
    }

    fn max_rate(
        &self,
        mesh: &Mesh,
        theta: &UncertaintyInterval,
        problem: &GhjbProblem,
        control_margin: f64,
    ) -> f64 {
        let mut x = [0.0; 2];
        let mut g = vec![0.0; mesh.len()];
        for (node, gv) in g.iter_mut().enumerate() {
            mesh.coords(node, &mut x);
            *gv = problem.terminal(&x[..mesh.d]);
        }
        (0..mesh.len())
            .map(|node| {
                let st = mesh.stencil(&g, node);
                let (mut ctrl, _) = self.control_drift(&st.central, mesh.d);
                ctrl.iter_mut().for_each(|c| *c *= control_margin);
                self.rate(mesh, node, theta.hi(), &ctrl)
            })
            .fold(0.0, f64::max)
    }
}

/// Value, gradient and Hessian on every node at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSlice {
    pub t: f64,
    pub values: Vec<f64>,
    /// `d` entries per node.
    pub gradient: Vec<f64>,
    /// Row-major `d×d` entries per node.
    pub hessian: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: GridSpec,
    /// Recorded slices in increasing time order; always includes `t = 0` and `t = T`.
    pub slices: Vec<ValueSlice>,
}

impl ValueField {
    pub fn slice_at(&self, t: f64) -> Result<&ValueSlice> {
        let tol = 0.5 * self.grid.step();
        self.slices
            .iter()
            .find(|s| (s.t - t).abs() <= tol)
            .ok_or_else(|| Error::Lookup(format!("no value slice stored at t = {t}")))
    }

    pub fn initial(&self) -> &ValueSlice {
        &self.slices[0]
    }

    /// Multilinear interpolation of a slice at `x` (clamped to the grid).
    pub fn interpolate(&self, slice: &ValueSlice, x: &[f64]) -> f64 {
        let mesh = Mesh::new(&self.grid);
        let mut idx = [0usize; 2];
        let mut w = [0.0; 2];
        for k in 0..mesh.d {
            let s = ((x[k] - mesh.lo[k]) / mesh.dx[k]).clamp(0.0, (mesh.n[k] - 1) as f64);
            let i = (s.floor() as usize).min(mesh.n[k] - 2);
            idx[k] = i;
            w[k] = s - i as f64;
        }
        let at = |i: usize, j: usize| slice.values[i + j * mesh.n[0]];
        if mesh.d == 1 {
            (1.0 - w[0]) * at(idx[0], 0) + w[0] * at(idx[0] + 1, 0)
        } else {
            let (i, j) = (idx[0], idx[1]);
            (1.0 - w[0]) * (1.0 - w[1]) * at(i, j)
                + w[0] * (1.0 - w[1]) * at(i + 1, j)
                + (1.0 - w[0]) * w[1] * at(i, j + 1)
                + w[0] * w[1] * at(i + 1, j + 1)
        }
    }

    /// `v(0, x)` by interpolation.
    pub fn value_at_start(&self, x: &[f64]) -> f64 {
        self.interpolate(self.initial(), x)
    }

    /// CSV with header `t,x0[,x1],value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_field_csv(
            w,
            &self.grid,
            "value",
            self.slices.iter().map(|s| (s.t, &s.values[..])),
        )
    }
}

fn write_field_csv<'a, W: Write>(
    w: W,
    grid: &GridSpec,
    column: &str,
    slices: impl Iterator<Item = (f64, &'a [f64])>,
) -> Result<()> {
    let mut wr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((0..grid.dim()).map(|k| format!("x{k}")));
    header.push(column.to_string());
    wr.write_record(&header)?;
    for (t, vals) in slices {
        for (node, v) in vals.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(grid.coords(node).iter().map(|c| c.to_string()));
            rec.push(v.to_string());
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn make_slice(mesh: &Mesh, t: f64, values: Vec<f64>) -> ValueSlice {
    let d = mesh.d;
    let mut gradient = vec![0.0; mesh.len() * d];
    let mut hessian = vec![0.0; mesh.len() * d * d];
    for node in 0..mesh.len() {
        let st = mesh.stencil(&values, node);
        gradient[node * d..(node + 1) * d].copy_from_slice(&st.central[..d]);
        hessian[node * d * d..(node + 1) * d * d].copy_from_slice(&st.hess[..d * d]);
    }
    ValueSlice {
        t,
        values,
        gradient,
        hessian,
    }
}

/// March the G-HJB backward from `v(T) = g` to `t = 0` with the explicit
/// scheme. Slices are stored at `t = 0`, `t = T` and the steps nearest to each
/// entry of `record_times`.
pub fn solve_ghjb(
    problem: &GhjbProblem,
    theta: &UncertaintyInterval,
    grid: &GridSpec,
    record_times: &[f64],
) -> Result<ValueField> {
    let mesh = Mesh::new(grid);
    let coeffs = Coefficients::build(problem, &mesh)?;
    let n_steps = grid.n_steps();
    let dt = grid.step();
    let bound = coeffs.max_rate(&mesh, theta, problem, 1.0);
    if dt * bound > CFL_SAFETY * (1.0 + 1e-9) {
        return Err(Error::config(format!(
            "pde time step {dt:e} violates the stability bound {:e}",
            CFL_SAFETY / bound
        )));
    }
    let mut record: Vec<usize> = record_times
        .iter()
        .filter(|t| (0.0..=grid.horizon).contains(*t))
        .map(|t| (t / dt).round() as usize)
        .chain([0, n_steps])
        .collect();
    record.sort_unstable();
    record.dedup();

    let d = mesh.d;
    let mut x = [0.0; 2];
    let mut v: Vec<f64> = (0..mesh.len())
        .map(|node| {
            mesh.coords(node, &mut x);
            problem.terminal(&x[..d])
        })
        .collect();
    let mut slices = vec![make_slice(&mesh, grid.horizon, v.clone())];
    let mut next = vec![0.0; v.len()];
    for step in (0..n_steps).rev() {
        let unstable = std::sync::atomic::AtomicBool::new(false);
        next.par_iter_mut().enumerate().for_each(|(node, out)| {
            let st = mesh.stencil(&v, node);
            let a = &coeffs.diffusion[node];
            let mut bracket: f64 = (0..d * d).map(|k| a[k] * st.hess[k]).sum();
            if let Some(b1) = &coeffs.bracket_drift {
                for k in 0..d {
                    bracket += b1[node][k] * st.upwind(k, b1[node][k]);
                }
            }
            let (ctrl, cost) = coeffs.control_drift(&st.central, d);
            let mut adv = 0.0;
            for k in 0..d {
                let vel = coeffs.drift[node][k] + ctrl[k];
                // central differences stay monotone while diffusion dominates
                let slope = if vel.abs() * mesh.dx[k] <= theta.lo() * a[k * d + k] {
                    st.central[k]
                } else {
                    st.upwind(k, vel)
                };
                adv += vel * slope;
            }
            let q = coeffs.running.as_ref().map_or(0.0, |q| 0.5 * q[node]);
            if coeffs.rate(&mesh, node, theta.hi(), &ctrl) * dt > 1.0 {
                unstable.store(true, std::sync::atomic::Ordering::Relaxed);
            }
            *out = v[node] + dt * (g_nonlinearity(bracket, theta) + adv + cost + q);
        });
        if unstable.into_inner() {
            return Err(Error::Solver {
                step,
                reason: "explicit stability bound violated by the control drift".into(),
            });
        }
        if next.iter().any(|y| !y.is_finite()) {
            return Err(Error::Solver {
                step,
                reason: "non-finite value".into(),
            });
        }
        std::mem::swap(&mut v, &mut next);
        if record.binary_search(&step).is_ok() {
            slices.push(make_slice(&mesh, step as f64 * dt, v.clone()));
        }
    }
    slices.reverse();
    Ok(ValueField {
        grid: grid.clone(),
        slices,
    })
}

/// Richardson extrapolation of [`solve_ghjb`]: solve on `grid` and on the grid
/// with every axis refined twice and the time step quartered, then combine
/// `2·v_fine − v_coarse` on the coarse nodes. This removes the leading
/// first-order error of the upwind terms.
pub fn solve_ghjb_richardson(
    problem: &GhjbProblem,
    theta: &UncertaintyInterval,
    grid: &GridSpec,
    record_times: &[f64],
) -> Result<ValueField> {
    let coarse = solve_ghjb(problem, theta, grid, record_times)?;
    let fine_grid = GridSpec::new(
        grid.axes.iter().map(Axis::refined).collect(),
        grid.step() / 4.0,
        grid.horizon,
    )?;
    let times: Vec<f64> = coarse.slices.iter().map(|s| s.t).collect();
    let fine = solve_ghjb(problem, theta, &fine_grid, &times)?;
    if fine.slices.len() != coarse.slices.len() {
        return Err(Error::Lookup(
            "refined solve recorded a different set of time slices".into(),
        ));
    }
    let mesh = Mesh::new(grid);
    let fine_n0 = fine_grid.axes[0].nodes();
    let slices = coarse
        .slices
        .iter()
        .zip(&fine.slices)
        .map(|(c, f)| {
            let values = (0..mesh.len())
                .map(|node| {
                    let (i, j) = mesh.split(node);
                    let fnode = 2 * i as usize + 2 * j as usize * fine_n0;
                    2.0 * f.values[fnode] - c.values[node]
                })
                .collect();
            make_slice(&mesh, c.t, values)
        })
        .collect();
    Ok(ValueField {
        grid: grid.clone(),
        slices,
    })
}

/// Worst-case parameter on every node and requested time.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaStarField {
    pub grid: GridSpec,
    pub times: Vec<f64>,
    /// `sigma_star[time][node]`, each entry an interval endpoint.
    pub sigma_star: Vec<Vec<f64>>,
}

impl SigmaStarField {
    /// CSV with header `t,x0[,x1],sigma_star`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_field_csv(
            w,
            &self.grid,
            "sigma_star",
            self.times
                .iter()
                .copied()
                .zip(self.sigma_star.iter().map(|v| &v[..])),
        )
    }
}

/// Apply [`g_argmax`] to `bracket(x, ∇v, ∇²v)` on every node of the stored
/// slices at `times`.
pub fn sigma_star_field(
    vf: &ValueField,
    theta: &UncertaintyInterval,
    times: &[f64],
    bracket: impl Fn(&[f64], &[f64], &[f64]) -> f64,
) -> Result<SigmaStarField> {
    let d = vf.grid.dim();
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let slice = vf.slice_at(t)?;
        let field = (0..slice.values.len())
            .map(|node| {
                let x = vf.grid.coords(node);
                let g = &slice.gradient[node * d..(node + 1) * d];
                let h = &slice.hessian[node * d * d..(node + 1) * d * d];
                g_argmax(bracket(&x, g, h), theta)
            })
            .collect();
        out.push(field);
    }
    Ok(SigmaStarField {
        grid: vf.grid.clone(),
        times: times.to_vec(),
        sigma_star: out,
    })
}

/// Fixed-parameter LQ problem `v(t, x) = ½xᵀP(t)x + c(t)` with
/// `−Ṗ = AᵀP + PA − PBBᵀP + Q₀`, `P(T) = P_T` and `−ċ = (σ/2) tr(CCᵀP)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub q0: DMatrix<f64>,
    pub terminal_weight: DMatrix<f64>,
    pub horizon: f64,
}

impl RiccatiProblem {
    /// The full LQ model; the terminal cost `rᵀQ₁r` becomes `P_T = 2Q₁`.
    pub fn lq_full(model: &MultiscaleLQModel) -> Self {
        Self {
            a: model.drift_matrix(),
            b: model.control_matrix(),
            noise: model.noise_matrix(),
            q0: model.running_weight_full(),
            terminal_weight: model.terminal_weight_full() * 2.0,
            horizon: model.horizon,
        }
    }

    pub fn lq_reduced(model: &ReducedLQModel) -> Self {
        Self {
            a: model.a_bar.clone(),
            b: model.b_bar.clone(),
            noise: model.c_bar.clone(),
            q0: model.q0.clone(),
            terminal_weight: &model.q1 * 2.0,
            horizon: model.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// Increasing times from `t` to `T`.
    pub times: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub c: Vec<f64>,
}

impl RiccatiSolution {
    pub fn value(&self, index: usize, x: &[f64]) -> f64 {
        let p = &self.p[index];
        let n = p.nrows();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += x[i] * p[(i, j)] * x[j];
            }
        }
        0.5 * q + self.c[index]
    }
}

/// Maximum RK4 step for the Riccati oracle.
pub const RICCATI_MAX_STEP: f64 = 1e-4;

/// Integrate the Riccati system backward from `T` to `t_start` with RK4.
pub fn riccati_solve(
    problem: &RiccatiProblem,
    sigma: f64,
    t_start: f64,
) -> Result<RiccatiSolution> {
    let n = problem.a.nrows();
    if problem.terminal_weight.shape() != (n, n) || problem.q0.shape() != (n, n) {
        return Err(Error::config("Riccati weights have the wrong shape"));
    }
    if !(0.0..=problem.horizon).contains(&t_start) {
        return Err(Error::config(format!("t = {t_start} outside [0, T]")));
    }
    let bbt = &problem.b * problem.b.transpose();
    let cct = &problem.noise * problem.noise.transpose();
    // derivatives with respect to backward time s = T − t
    let rhs = |p: &DMatrix<f64>| -> (DMatrix<f64>, f64) {
        let dp = problem.a.transpose() * p + p * &problem.a - p * &bbt * p + &problem.q0;
        let dc = 0.5 * sigma * (&cct * p).trace();
        (dp, dc)
    };
    let span = problem.horizon - t_start;
    let steps = ((span / RICCATI_MAX_STEP).ceil() as usize).max(1);
    let h = span / steps as f64;
    let mut p = problem.terminal_weight.clone();
    let mut c = 0.0;
    let mut times = vec![problem.horizon];
    let mut ps = vec![p.clone()];
    let mut cs = vec![c];
    for k in 1..=steps {
        let (k1, l1) = rhs(&p);
        let (k2, l2) = rhs(&(&p + &k1 * (0.5 * h)));
        let (k3, l3) = rhs(&(&p + &k2 * (0.5 * h)));
        let (k4, l4) = rhs(&(&p + &k3 * h));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        c += (l1 + 2.0 * l2 + 2.0 * l3 + l4) * (h / 6.0);
        if !(p.amax() <= 1e8) || !c.is_finite() {
            return Err(Error::Oracle(format!(
                "Riccati solution blows up at t = {}",
                problem.horizon - k as f64 * h
            )));
        }
        times.push(problem.horizon - k as f64 * h);
        ps.push(p.clone());
        cs.push(c);
    }
    times.reverse();
    ps.reverse();
    cs.reverse();
    Ok(RiccatiSolution {
        times,
        p: ps,
        c: cs,
    })
}

/// `v(t, x)` of the fixed-parameter LQ problem.
pub fn riccati_value(problem: &RiccatiProblem, sigma: f64, t: f64, x: &[f64]) -> Result<f64> {
    if x.len() != problem.a.nrows() {
        return Err(Error::config(
            "state dimension does not match the Riccati problem",
        ));
    }
    let sol = riccati_solve(problem, sigma, t)?;
    Ok(sol.value(0, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::reduce_lq;

    fn iv(lo: f64, hi: f64) -> UncertaintyInterval {
        UncertaintyInterval::new(lo, hi).unwrap()
    }

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn riccati_closed_form() {
        let prob = RiccatiProblem {
            a: scalar(0.0),
            b: scalar(1.0),
            noise: scalar(1.0),
            q0: scalar(0.0),
            terminal_weight: scalar(1.0),
            horizon: 1.0,
        };
        let v = riccati_value(&prob, 0.0, 0.0, &[1.0]).unwrap();
        assert!((v - 0.25).abs() < 1e-12, "v = {v}");
        let sol = riccati_solve(&prob, 0.0, 0.0).unwrap();
        for (t, p) in sol.times.iter().zip(&sol.p).step_by(997) {
            assert!((p[(0, 0)] - 1.0 / (2.0 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn riccati_zero_cost() {
        let prob = RiccatiProblem {
            a: scalar(-1.0),
            b: scalar(1.0),
            noise: scalar(1.0),
            q0: scalar(0.0),
            terminal_weight: scalar(0.0),
            horizon: 0.5,
        };
        assert_eq!(riccati_value(&prob, 1.0, 0.0, &[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn riccati_offset_is_linear_in_sigma() {
        let model = MultiscaleLQModel::regulator_benchmark(0.2, iv(1.0, 1.0), 0.1).unwrap();
        let prob = RiccatiProblem::lq_full(&model);
        let c1 = riccati_value(&prob, 1.0, 0.0, &[0.0, 0.0]).unwrap();
        let c2 = riccati_value(&prob, 2.0, 0.0, &[0.0, 0.0]).unwrap();
        assert!(c1 > 0.0);
        assert!((c2 - 2.0 * c1).abs() < 1e-12 * c2);
    }

    #[test]
    fn riccati_stays_symmetric_psd() {
        let model = MultiscaleLQModel::regulator_benchmark(0.1, iv(1.0, 1.0), 0.1).unwrap();
        let sol = riccati_solve(&RiccatiProblem::lq_full(&model), 1.0, 0.0).unwrap();
        for p in &sol.p {
            assert!((p - p.transpose()).amax() < 1e-10);
            let e = nalgebra::SymmetricEigen::new(p.clone()).eigenvalues;
            assert!(e.min() > -1e-10);
        }
        assert_eq!(sol.p.last().unwrap(), &(model.terminal_weight_full() * 2.0));
    }

    #[test]
    fn riccati_blow_up() {
        // P grows like exp(2a(T − t))
        let prob = RiccatiProblem {
            a: scalar(20.0),
            b: scalar(0.0),
            noise: scalar(0.0),
            q0: scalar(0.0),
            terminal_weight: scalar(1.0),
            horizon: 2.0,
        };
        assert!(matches!(
            riccati_value(&prob, 1.0, 0.0, &[1.0]),
            Err(Error::Oracle(_))
        ));
    }

    fn ou_problem(curv: f64) -> GhjbProblem {
        GhjbProblem::new(
            1,
            |x, o| o[0] = -x[0],
            |_x, o| o[0] = 1.0,
            move |x| curv * x[0] * x[0],
        )
    }

    #[test]
    fn constants_solve_the_pde() {
        let p = GhjbProblem::new(1, |x, o| o[0] = -x[0], |_x, o| o[0] = 1.0, |_x| 1.0);
        let grid = GridSpec::new(vec![Axis::new(-2.0, 2.0, 16).unwrap()], 1e-3, 0.1).unwrap();
        let vf = solve_ghjb(&p, &iv(0.5, 1.0), &grid, &[0.05]).unwrap();
        assert_eq!(vf.slices.len(), 3);
        for s in &vf.slices {
            assert!(s.values.iter().all(|v| (*v - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn terminal_slice_is_exact() {
        let p = ou_problem(1.0);
        let grid = GridSpec::new(vec![Axis::new(-2.0, 2.0, 20).unwrap()], 1e-3, 0.1).unwrap();
        let vf = solve_ghjb(&p, &iv(0.5, 1.0), &grid, &[]).unwrap();
        let last = vf.slices.last().unwrap();
        assert_eq!(last.t, 0.1);
        for (node, v) in last.values.iter().enumerate() {
            assert_eq!(*v, p.terminal(&grid.coords(node)));
        }
    }

    #[test]
    fn unstable_step_is_rejected() {
        let p = ou_problem(1.0);
        let grid = GridSpec::new(vec![Axis::new(-2.0, 2.0, 40).unwrap()], 0.05, 0.1).unwrap();
        assert!(matches!(
            solve_ghjb(&p, &iv(0.5, 1.0), &grid, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_interval_matches_riccati_1d() {
        let model = MultiscaleLQModel::regulator_benchmark(0.1, iv(1.0, 1.0), 0.1).unwrap();
        let red = reduce_lq(&model).unwrap();
        let prob = GhjbProblem::lq_reduced(&red).unwrap();
        let theta = iv(1.0, 1.0);
        let grid = GridSpec::with_stable_dt(
            vec![Axis::new(-3.0, 5.0, 160).unwrap()],
            0.1,
            &prob,
            &theta,
            2.0,
        )
        .unwrap();
        let vf = solve_ghjb(&prob, &theta, &grid, &[]).unwrap();
        let ric = RiccatiProblem::lq_reduced(&red);
        for x in [-1.0, 0.0, 1.0, 2.0, 3.0] {
            let exact = riccati_value(&ric, 1.0, 0.0, &[x]).unwrap();
            let fd = vf.value_at_start(&[x]);
            assert!(
                (fd - exact).abs() <= 0.01 * exact.abs().max(0.05),
                "x = {x}: fd {fd} vs riccati {exact}"
            );
        }
    }

    #[test]
    fn richardson_matches_riccati_2d() {
        let model = MultiscaleLQModel::regulator_benchmark(0.3, iv(1.0, 1.0), 0.1).unwrap();
        let prob = GhjbProblem::lq_full(&model).unwrap();
        let theta = iv(1.0, 1.0);
        let axes = vec![
            Axis::new(-3.0, 5.0, 40).unwrap(),
            Axis::new(-5.0, 5.0, 30).unwrap(),
        ];
        let grid = GridSpec::with_stable_dt(axes, 0.1, &prob, &theta, 2.0).unwrap();
        let plain = solve_ghjb(&prob, &theta, &grid, &[]).unwrap();
        let rich = solve_ghjb_richardson(&prob, &theta, &grid, &[]).unwrap();
        let exact = riccati_value(&RiccatiProblem::lq_full(&model), 1.0, 0.0, &[1.0, 0.5]).unwrap();
        let e_plain = (plain.value_at_start(&[1.0, 0.5]) - exact).abs();
        let e_rich = (rich.value_at_start(&[1.0, 0.5]) - exact).abs();
        assert!(
            e_rich < 0.2 * e_plain,
            "plain {e_plain}, extrapolated {e_rich}"
        );
        assert!(e_rich < 0.01 * exact);
    }

    #[test]
    fn convex_terminal_selects_upper_endpoint() {
        let theta = iv(0.5, 2.0);
        for (curv, expected) in [(1.0, 2.0), (-1.0, 0.5)] {
            let p = ou_problem(curv);
            let grid = GridSpec::with_stable_dt(
                vec![Axis::new(-3.0, 3.0, 30).unwrap()],
                0.2,
                &p,
                &theta,
                1.0,
            )
            .unwrap();
            let vf = solve_ghjb(&p, &theta, &grid, &[0.1]).unwrap();
            let times: Vec<f64> = vf.slices.iter().map(|s| s.t).collect();
            assert_eq!(times.len(), 3);
            let field =
                sigma_star_field(&vf, &theta, &times, |x, g, h| p.bracket(x, g, h)).unwrap();
            for row in &field.sigma_star {
                assert!(row.iter().all(|s| *s == expected));
            }
            assert!(matches!(
                sigma_star_field(&vf, &theta, &[0.137], |x, g, h| p.bracket(x, g, h)),
                Err(Error::Lookup(_))
            ));
        }
    }

    #[test]
    fn mixed_sign_bracket_follows_sign_rule() {
        let p = ou_problem(1.0);
        let theta = iv(1.0, 3.0);
        let grid = GridSpec::new(vec![Axis::new(-1.0, 1.0, 10).unwrap()], 1e-3, 0.01).unwrap();
        let vf = solve_ghjb(&p, &theta, &grid, &[]).unwrap();
        let field = sigma_star_field(&vf, &theta, &[0.0], |x, _g, _h| x[0]).unwrap();
        for (node, s) in field.sigma_star[0].iter().enumerate() {
            let x = grid.coords(node)[0];
            assert_eq!(*s, if x >= 0.0 { 3.0 } else { 1.0 });
        }
    }

    #[test]
    fn field_csv_header() {
        let p = ou_problem(1.0);
        let grid = GridSpec::new(vec![Axis::new(-1.0, 1.0, 8).unwrap()], 1e-3, 0.01).unwrap();
        let vf = solve_ghjb(&p, &iv(1.0, 1.0), &grid, &[]).unwrap();
        let mut buf = Vec::new();
        vf.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x0,value\n0,-1,"));
        assert_eq!(text.lines().count(), 1 + 2 * 9);
    }

    #[test]
    fn grid_validation() {
        assert!(Axis::new(1.0, 1.0, 10).is_err());
        assert!(Axis::new(0.0, 1.0, 4).is_err());
        let a = Axis::new(0.0, 1.0, 8).unwrap();
        assert!(GridSpec::new(vec![a; 3], 0.1, 1.0).is_err());
        assert!(GridSpec::new(vec![a], 2.0, 1.0).is_err());
        let g = GridSpec::new(vec![a, a], 0.1, 1.0).unwrap();
        assert_eq!(g.n_nodes(), 81);
        assert_eq!(g.coords(10), vec![0.125, 0.125]);
    }

    #[test]
    fn dimension_mismatch() {
        let p = ou_problem(1.0);
        let a = Axis::new(0.0, 1.0, 8).unwrap();
        let grid = GridSpec::new(vec![a, a], 1e-3, 0.01).unwrap();
        assert!(solve_ghjb(&p, &iv(1.0, 1.0), &grid, &[]).is_err());
    }
}
