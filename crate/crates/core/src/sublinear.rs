//! The G-nonlinearity and the worst-case (sublinear) expectation.
//!
//! A sublinear expectation over a parameter interval is represented as the
//! maximum of ordinary expectations, one per parameter value. Parameter
//! intervals are discretised on a uniform [`ThetaGrid`]; each grid value gets
//! its own Monte Carlo ensemble and the estimator reports the largest mean.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]` with `0 < lo <= hi` for an unknown diffusion
/// coefficient (or noise level).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyInterval {
    lo: f64,
    hi: f64,
}

impl UncertaintyInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
            return Err(Error::config(format!(
                "uncertainty interval requires 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// The singleton interval `[value, value]`.
    pub fn degenerate(value: f64) -> Result<Self> {
        Self::new(value, value)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// `[lo², hi²]`, the range of the generator multiplier when the parameter
    /// enters the diffusion matrix quadratically (e.g. an additive noise level).
    pub fn squared(&self) -> Self {
        Self {
            lo: self.lo * self.lo,
            hi: self.hi * self.hi,
        }
    }

    /// True if `self` is contained in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }
}

/// `G(x) = max_{σ∈[lo,hi]} σ·x/2`: `x·hi/2` for `x >= 0`, `x·lo/2` otherwise.
pub fn g_nonlinearity(x: f64, theta: &UncertaintyInterval) -> f64 {
    0.5 * x * g_argmax(x, theta)
}

/// The endpoint attaining the maximum in [`g_nonlinearity`]. Ties at `x = 0`
/// resolve to the upper endpoint.
pub fn g_argmax(x: f64, theta: &UncertaintyInterval) -> f64 {
    if x >= 0.0 {
        theta.hi
    } else {
        theta.lo
    }
}

/// Uniform grid over a parameter range, used to replace the supremum over a
/// continuum by a finite maximum.
///
/// Unlike [`UncertaintyInterval`] the bounds may be zero or negative, since
/// some model parameters (e.g. the pitchfork fast-noise variance) are allowed
/// to vanish.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl ThetaGrid {
    pub const DEFAULT_POINTS: usize = 11;

    pub fn new(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::config("theta grid must have at least one point"));
        }
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::config(format!(
                "theta grid requires finite lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if n_points == 1 && lo != hi {
            return Err(Error::config(
                "a single-point theta grid needs lo == hi".to_string(),
            ));
        }
        if n_points > 1 && lo == hi {
            return Err(Error::config(
                "a degenerate range admits only a single grid point".to_string(),
            ));
        }
        let values = if n_points == 1 {
            vec![lo]
        } else {
            let h = (hi - lo) / (n_points - 1) as f64;
            (0..n_points)
                .map(|i| {
                    if i + 1 == n_points {
                        hi
                    } else {
                        lo + h * i as f64
                    }
                })
                .collect()
        };
        Ok(Self { lo, hi, values })
    }

    pub fn from_interval(interval: &UncertaintyInterval, n_points: usize) -> Result<Self> {
        if interval.is_degenerate() {
            Self::new(interval.lo, interval.hi, 1)
        } else {
            Self::new(interval.lo, interval.hi, n_points)
        }
    }

    pub fn singleton(theta: f64) -> Result<Self> {
        Self::new(theta, theta, 1)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-parameter Monte Carlo summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaMean {
    pub theta: f64,
    pub mean: f64,
    /// Sample standard deviation divided by `√n`.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseEstimate {
    pub value: f64,
    pub argmax_theta: f64,
    pub per_theta_means: Vec<ThetaMean>,
    pub n_samples: usize,
}

/// Mean and standard error of a sample, summed left to right.
pub fn mean_and_std_error(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Worst-case expectation `max_θ E_θ[functional]` over `grid`.
///
/// `ensemble` produces the samples for one parameter value and `functional`
/// maps each sample to a real number. Evaluating several functionals with the
/// same (deterministic) `ensemble` gives estimates on shared samples, which is
/// what the sub-additivity and homogeneity properties refer to.
///
/// Ensembles for different grid values are built in parallel; the final max
/// is a sequential fold in grid order, so ties go to the smallest theta.
pub fn worst_case_expectation<S, E, Q>(
    grid: &ThetaGrid,
    ensemble: E,
    functional: Q,
) -> Result<WorstCaseEstimate>
where
    S: Send,
    E: Fn(f64) -> Vec<S> + Sync,
    Q: Fn(&S) -> f64 + Sync,
{
    if grid.is_empty() {
        return Err(Error::config("empty theta grid"));
    }
    let per_theta: Vec<(f64, Vec<f64>)> = grid
        .values()
        .par_iter()
        .map(|&theta| {
            let samples = ensemble(theta);
            (theta, samples.iter().map(&functional).collect())
        })
        .collect();
    let n_samples = per_theta[0].1.len();
    let mut means = Vec::with_capacity(per_theta.len());
    for (theta, values) in &per_theta {
        if values.len() != n_samples {
            return Err(Error::config(format!(
                "ensemble sizes differ across theta ({} vs {n_samples})",
                values.len()
            )));
        }
        let (mean, std_error) = mean_and_std_error(values)?;
        means.push(ThetaMean {
            theta: *theta,
            mean,
            std_error,
        });
    }
    let best = means.iter().skip(1).fold(
        means[0],
        |best, m| if m.mean > best.mean { *m } else { best },
    );
    Ok(WorstCaseEstimate {
        value: best.mean,
        argmax_theta: best.theta,
        per_theta_means: means,
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(lo: f64, hi: f64) -> UncertaintyInterval {
        UncertaintyInterval::new(lo, hi).unwrap()
    }

    #[test]
    fn g_branches() {
        assert_eq!(g_nonlinearity(2.0, &iv(0.8, 1.0)), 1.0);
        assert_eq!(g_nonlinearity(0.0, &iv(0.8, 1.0)), 0.0);
        assert_eq!(g_nonlinearity(0.0, &iv(0.1, 7.0)), 0.0);
        assert_eq!(g_nonlinearity(-2.0, &iv(0.8, 1.0)), -0.8);
    }

    #[test]
    fn argmax_branches() {
        assert_eq!(g_argmax(1e-9, &iv(1.0, 2.0)), 2.0);
        assert_eq!(g_argmax(-3.0, &iv(1.0, 2.0)), 1.0);
        assert_eq!(g_argmax(0.0, &iv(1.0, 2.0)), 2.0);
    }

    #[test]
    fn interval_validation() {
        assert!(UncertaintyInterval::new(0.0, 1.0).is_err());
        assert!(UncertaintyInterval::new(1.0, 0.5).is_err());
        assert!(UncertaintyInterval::new(f64::NAN, 1.0).is_err());
        assert!(UncertaintyInterval::degenerate(0.8)
            .unwrap()
            .is_degenerate());
        assert_eq!(iv(0.5, 2.0).squared(), iv(0.25, 4.0));
    }

    #[test]
    fn grid_layout() {
        let g = ThetaGrid::new(0.8, 1.0, 3).unwrap();
        assert_eq!(g.values()[0], 0.8);
        assert_eq!(g.values()[2], 1.0);
        assert!((g.values()[1] - 0.9).abs() < 1e-15);
        assert!(ThetaGrid::new(0.0, 1.0, 0).is_err());
        assert!(ThetaGrid::new(0.0, 1.0, 1).is_err());
        assert_eq!(ThetaGrid::singleton(0.3).unwrap().values(), &[0.3]);
        let d = ThetaGrid::from_interval(&iv(1.0, 1.0), 11).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn singleton_grid_is_plain_mean() {
        let grid = ThetaGrid::singleton(0.5).unwrap();
        let samples = vec![1.0, 2.0, 4.0, 5.0];
        let est = worst_case_expectation(&grid, |_| samples.clone(), |x| *x).unwrap();
        assert_eq!(est.value, 3.0);
        assert_eq!(est.argmax_theta, 0.5);
        assert_eq!(est.n_samples, 4);
    }

    #[test]
    fn constant_functional_ties_go_low() {
        let grid = ThetaGrid::new(0.8, 1.0, 3).unwrap();
        let est = worst_case_expectation(&grid, |_| vec![0u8; 5], |_| 1.5).unwrap();
        assert_eq!(est.value, 1.5);
        assert_eq!(est.argmax_theta, 0.8);
        assert!(est.per_theta_means.iter().all(|m| m.std_error == 0.0));
    }

    #[test]
    fn theta_indexed_values() {
        let grid = ThetaGrid::new(0.8, 1.0, 3).unwrap();
        let value_at = |theta: f64| {
            if (theta - 0.8).abs() < 1e-9 {
                1.0
            } else if (theta - 0.9).abs() < 1e-9 {
                3.0
            } else {
                2.0
            }
        };
        let est = worst_case_expectation(&grid, |t| vec![value_at(t); 3], |x| *x).unwrap();
        assert_eq!(est.value, 3.0);
        assert!((est.argmax_theta - 0.9).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let grid = ThetaGrid::singleton(1.0).unwrap();
        let err = worst_case_expectation(&grid, |_| vec![1.0], |x| *x).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientSamples { needed: 2, got: 1 }
        ));
    }

    #[test]
    fn mismatched_ensemble_sizes() {
        let grid = ThetaGrid::new(1.0, 2.0, 2).unwrap();
        let err = worst_case_expectation(&grid, |t| vec![1.0; if t < 1.5 { 3 } else { 4 }], |x| *x)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    // Dyadic sample values keep every sum and every mean exact, so the
    // axioms can be compared with `==`/`<=` rather than a tolerance.
    fn dyadic(k: i64) -> f64 {
        1000.0 * (k as f64) * 2f64.powi(-20)
    }

    proptest! {
        #[test]
        fn g_matches_argmax_identity(x in -1e6f64..1e6, lo in 0.01f64..5.0, w in 0.0f64..5.0) {
            let theta = iv(lo, lo + w);
            let lhs = g_nonlinearity(x, &theta);
            let rhs = x * g_argmax(x, &theta) / 2.0;
            prop_assert_eq!(lhs, rhs);
            // and it is the max over the two endpoints
            let best = (theta.lo() * x / 2.0).max(theta.hi() * x / 2.0);
            prop_assert!((lhs - best).abs() <= 1e-12 * best.abs().max(1.0));
        }

        #[test]
        fn subadditive_and_homogeneous(
            seed_x in proptest::collection::vec(-1000i64..1000, 20),
            seed_y in proptest::collection::vec(-1000i64..1000, 20),
            lambda_pow in -3i32..4,
        ) {
            let grid = ThetaGrid::new(0.0, 1.0, 5).unwrap();
            // shared per-theta ensemble of (x, y) pairs
            let ens = |theta: f64| -> Vec<(f64, f64)> {
                let shift = (theta * 4.0).round() as i64;
                (0..20).map(|i| (dyadic(seed_x[i] + shift * (i as i64 % 3)),
                                  dyadic(seed_y[i] - shift))).collect()
            };
            let ex = worst_case_expectation(&grid, ens, |s| s.0).unwrap().value;
            let ey = worst_case_expectation(&grid, ens, |s| s.1).unwrap().value;
            let exy = worst_case_expectation(&grid, ens, |s| s.0 + s.1).unwrap().value;
            prop_assert!(exy <= ex + ey);
            let lambda = 2f64.powi(lambda_pow);
            let el = worst_case_expectation(&grid, ens, |s| lambda * s.0).unwrap().value;
            prop_assert_eq!(el, lambda * ex);
        }

        #[test]
        fn refinement_never_decreases(n in 2usize..8, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let coarse = ThetaGrid::new(0.5, 1.5, n).unwrap();
            let fine = ThetaGrid::new(0.5, 1.5, 2 * n - 1).unwrap();
            let ens = |theta: f64| vec![a * theta * theta + b * theta; 2];
            let c = worst_case_expectation(&coarse, ens, |x| *x).unwrap().value;
            let f = worst_case_expectation(&fine, ens, |x| *x).unwrap().value;
            prop_assert!(f >= c - 1e-12);
        }
    }
}
