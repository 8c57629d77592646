//! Per-path random streams.
//!
//! Every Monte Carlo path owns an independent ChaCha8 stream keyed by
//! `(master_seed, path_index)`: the master seed fixes the key and the path
//! index selects the ChaCha stream (nonce). Within a path, draws are consumed
//! step by step, so the `k`-th normal of path `p` depends only on
//! `(master_seed, p, k)`. Ensembles are therefore bit-identical under any
//! parallel schedule, and two systems that read the same path stream see the
//! same Brownian increments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct PathRng {
    inner: ChaCha8Rng,
}

impl PathRng {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(path_index);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}

/// Derive a child seed from a parent seed and a label, e.g. one seed per
/// epsilon value of a convergence study.
pub fn derive_seed(master_seed: u64, label: u64) -> u64 {
    PathRng::new(master_seed, label.wrapping_add(1 << 63)).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Pinned output of the generator; changing the algorithm or its keying
    // breaks reproducibility of every stored result.
    #[test]
    fn test_vectors() {
        let mut r = PathRng::new(42, 0);
        let a: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(a, PINNED_U64_SEED42_PATH0);
        let mut r = PathRng::new(42, 7);
        let z = r.normal();
        assert_eq!(z.to_bits(), PINNED_NORMAL_SEED42_PATH7.to_bits());
    }

    const PINNED_U64_SEED42_PATH0: [u64; 3] = [
        12578764544318200737,
        17529487244874322312,
        7886285670807131020,
    ];
    const PINNED_NORMAL_SEED42_PATH7: f64 = -0.7210298260550787;

    #[test]
    fn streams_are_independent_of_order() {
        let mut a = PathRng::new(1, 3);
        let first: Vec<f64> = (0..5).map(|_| a.normal()).collect();
        let mut other = PathRng::new(1, 2);
        let _ = other.normal();
        let mut b = PathRng::new(1, 3);
        let again: Vec<f64> = (0..5).map(|_| b.normal()).collect();
        assert_eq!(first, again);
        let mut c = PathRng::new(1, 4);
        assert_ne!(first[0], c.normal());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(5, 0), derive_seed(5, 1));
        assert_eq!(derive_seed(5, 1), derive_seed(5, 1));
    }
}
