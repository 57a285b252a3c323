//! Additive-recurrence (Kronecker) quasi-random points on the unit cube.
//!
//! Point `i` is `frac(shift + (i + 1) * alpha)` with `alpha_j = phi_d^-(j+1)`,
//! where `phi_d` is the unique positive root of `x^(d+1) = x + 1` (the golden
//! ratio for `d = 1`). The shift is drawn uniformly from the seeded stream,
//! which turns the deterministic sequence into a randomized one without
//! losing its low discrepancy.

use rand::Rng as _;

use crate::rng;

#[derive(Debug, Clone)]
pub struct Kronecker {
    alpha: Vec<f64>,
    shift: Vec<f64>,
}

impl Kronecker {
    pub fn new(dim: usize, seed: u64) -> Self {
        let phi = generalized_golden_ratio(dim);
        let alpha = (1..=dim).map(|j| phi.powi(-(j as i32))).collect();
        let mut r = rng::rng(seed);
        let shift = (0..dim).map(|_| r.random::<f64>()).collect();
        Self { alpha, shift }
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        let n = (i + 1) as f64;
        self.alpha
            .iter()
            .zip(&self.shift)
            .map(|(a, s)| (s + n * a).fract())
            .collect()
    }

    pub fn points(&self, count: usize) -> Vec<Vec<f64>> {
        (0..count).map(|i| self.point(i)).collect()
    }
}

/// Positive root of `x^(d+1) = x + 1` by fixed-point iteration.
fn generalized_golden_ratio(dim: usize) -> f64 {
    let exp = 1.0 / (dim as f64 + 1.0);
    let mut x = 2.0f64;
    for _ in 0..64 {
        x = (1.0 + x).powf(exp);
    }
    x
}
