//! Exact Gaussian-process regression with a squared-exponential ARD kernel
//! and a constant mean equal to the sample mean of the observations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest noise variance ever placed on the diagonal.
pub const JITTER_FLOOR: f64 = 1e-10;
/// Largest jitter tried before giving up on a factorization.
pub const JITTER_CEILING: f64 = 1e-4;

pub const GRID_LENGTH_SCALES: [f64; 5] = [0.1, 0.2, 0.5, 1.0, 2.0];
pub const GRID_SIGNAL_VARIANCES: [f64; 3] = [0.25, 1.0, 4.0];
pub const GRID_NOISE_VARIANCES: [f64; 3] = [1e-6, 1e-4, 1e-2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelHyper {
    pub fn isotropic(dim: usize, length_scale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        Self {
            signal_variance,
            length_scales: vec![length_scale; dim],
            noise_variance,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.length_scales.len() != dim {
            return Err(Error::Argument(format!(
                "{} length scales for a {dim}-dimensional input",
                self.length_scales.len()
            )));
        }
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.signal_variance)
            || !self.length_scales.iter().all(|&l| finite_pos(l))
            || !(self.noise_variance.is_finite() && self.noise_variance >= 0.0)
        {
            return Err(Error::Argument(format!(
                "kernel hyperparameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// How [`GpModel::fit`] picks kernel hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperChoice {
    Fixed(KernelHyper),
    /// Isotropic grid over [`GRID_LENGTH_SCALES`] x [`GRID_SIGNAL_VARIANCES`]
    /// x [`GRID_NOISE_VARIANCES`], maximizing the log marginal likelihood.
    /// Ties keep the earliest grid entry.
    Auto,
}

/// `sigma_f^2 * exp(-1/2 * sum_i (x_i - x'_i)^2 / l_i^2)`
pub fn kernel(x: &[f64], x2: &[f64], hyper: &KernelHyper) -> Result<f64> {
    if x.len() != x2.len() || x.len() != hyper.length_scales.len() {
        return Err(Error::Argument(format!(
            "kernel dimensions disagree: {}, {}, {} length scales",
            x.len(),
            x2.len(),
            hyper.length_scales.len()
        )));
    }
    Ok(kernel_unchecked(x, x2, hyper))
}

fn kernel_unchecked(x: &[f64], x2: &[f64], hyper: &KernelHyper) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(&hyper.length_scales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    hyper.signal_variance * (-0.5 * r2).exp()
}

#[derive(Debug, Clone)]
pub struct GpModel {
    dim: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    hyper: KernelHyper,
    mean: f64,
    /// Diagonal jitter actually used, `>= max(noise_variance, JITTER_FLOOR)`.
    diag: f64,
    /// Row-major lower-triangular factor of `K + diag * I`.
    chol: Vec<f64>,
    /// `(K + diag * I)^-1 (y - mean)`
    alpha: Vec<f64>,
    log_marginal_likelihood: f64,
}

impl GpModel {
    /// Fits a model to `xs` (rows of length `dim`) and `ys`. Rows that are
    /// bitwise identical are merged into one observation with the mean of
    /// their targets.
    pub fn fit(dim: usize, xs: &[Vec<f64>], ys: &[f64], hyper: HyperChoice) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Argument(format!("{} inputs but {} targets", xs.len(), ys.len())));
        }
        if let Some(row) = xs.iter().find(|r| r.len() != dim) {
            return Err(Error::Argument(format!(
                "input row of length {} for dimension {dim}",
                row.len()
            )));
        }
        if xs.iter().flatten().chain(ys).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GP training data".into()));
        }
        let (x, y) = dedup(xs, ys);

        match hyper {
            HyperChoice::Fixed(h) => {
                h.validate(dim)?;
                Self::factorize(dim, x, y, h)
            }
            HyperChoice::Auto => {
                let mut best: Option<GpModel> = None;
                let mut last_err = None;
                for &l in &GRID_LENGTH_SCALES {
                    for &sf in &GRID_SIGNAL_VARIANCES {
                        for &sn in &GRID_NOISE_VARIANCES {
                            let h = KernelHyper::isotropic(dim, l, sf, sn);
                            match Self::factorize(dim, x.clone(), y.clone(), h) {
                                Ok(m) => {
                                    if best
                                        .as_ref()
                                        .is_none_or(|b| m.log_marginal_likelihood > b.log_marginal_likelihood)
                                    {
                                        best = Some(m);
                                    }
                                }
                                Err(e) => last_err = Some(e),
                            }
                        }
                    }
                }
                best.ok_or_else(|| last_err.expect("grid is non-empty"))
            }
        }
    }

    fn factorize(dim: usize, x: Vec<Vec<f64>>, y: Vec<f64>, hyper: KernelHyper) -> Result<Self> {
        let n = x.len();
        let mean = if n == 0 { 0.0 } else { y.iter().sum::<f64>() / n as f64 };
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let k = kernel_unchecked(&x[i], &x[j], &hyper);
                gram[i * n + j] = k;
                gram[j * n + i] = k;
            }
        }

        let mut diag = hyper.noise_variance.max(JITTER_FLOOR);
        let mut jitter = JITTER_FLOOR;
        let chol = loop {
            if let Some(l) = cholesky(&gram, n, diag) {
                break l;
            }
            // escalate x10 per failure, stop once past the ceiling
            if jitter > JITTER_CEILING {
                return Err(Error::Conditioning(format!(
                    "covariance of {n} points not positive definite with jitter up to {JITTER_CEILING}"
                )));
            }
            diag = hyper.noise_variance.max(JITTER_FLOOR) + jitter;
            jitter *= 10.0;
        };

        let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let z = forward_sub(&chol, n, &centered);
        let alpha = backward_sub(&chol, n, &z);
        let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
        let fit_term: f64 = z.iter().map(|v| v * v).sum();
        let log_marginal_likelihood = -0.5 * fit_term - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        Ok(Self {
            dim,
            x,
            y,
            hyper,
            mean,
            diag,
            chol,
            alpha,
            log_marginal_likelihood,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn mean_constant(&self) -> f64 {
        self.mean
    }

    pub fn diagonal_noise(&self) -> f64 {
        self.diag
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    /// Lower Cholesky factor of `K(X, X) + noise * I`, row-major `n x n`.
    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    /// Posterior mean and variance of the latent function at `point`.
    pub fn posterior(&self, point: &[f64]) -> Result<(f64, f64)> {
        if point.len() != self.dim {
            return Err(Error::Argument(format!(
                "query of dimension {} for a {}-dimensional model",
                point.len(),
                self.dim
            )));
        }
        let prior = self.hyper.signal_variance;
        let n = self.len();
        if n == 0 {
            return Ok((self.mean, prior));
        }
        // A noise-free model interpolates its observations exactly; the diagonal
        // jitter is only there to keep the factorization stable.
        if self.hyper.noise_variance == 0.0 {
            if let Some(i) = self.x.iter().position(|xi| xi.as_slice() == point) {
                return Ok((self.y[i], 0.0));
            }
        }
        let kstar: Vec<f64> = self
            .x
            .iter()
            .map(|xi| kernel_unchecked(point, xi, &self.hyper))
            .collect();
        let mean = self.mean + kstar.iter().zip(&self.alpha).map(|(k, a)| k * a).sum::<f64>();
        let v = forward_sub(&self.chol, n, &kstar);
        let var = prior - v.iter().map(|vi| vi * vi).sum::<f64>();
        debug_assert!(var > -1e-8, "posterior variance {var} far below zero");
        Ok((mean, var.max(0.0)))
    }
}

fn dedup(xs: &[Vec<f64>], ys: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(xs.len());
    let mut sums: Vec<(f64, usize)> = Vec::with_capacity(xs.len());
    for (x, &y) in xs.iter().zip(ys) {
        let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        match rows.iter().position(|r| bits(r) == bits(x)) {
            Some(i) => {
                sums[i].0 += y;
                sums[i].1 += 1;
            }
            None => {
                rows.push(x.clone());
                sums.push((y, 1));
            }
        }
    }
    let y = sums.into_iter().map(|(s, c)| s / c as f64).collect();
    (rows, y)
}

/// Cholesky of `a + diag * I`; `None` if not numerically positive definite.
fn cholesky(a: &[f64], n: usize, diag: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            if i == j {
                s += diag;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L z = b`.
fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * n + i];
    }
    z
}

/// Solves `L^T x = z`.
fn backward_sub(l: &[f64], n: usize, z: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * n + i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, noise: f64) -> KernelHyper {
        KernelHyper::isotropic(dim, 1.0, 1.0, noise)
    }

    #[test]
    fn kernel_values() {
        let h = unit(2, 0.0);
        assert_eq!(kernel(&[0.3, 0.4], &[0.3, 0.4], &h).unwrap(), 1.0);
        let v = kernel(&[1.0, 0.0], &[0.0, 0.0], &h).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
        let near = kernel(&[0.5, 0.0], &[0.0, 0.0], &h).unwrap();
        let far = kernel(&[5.0, 0.0], &[0.0, 0.0], &h).unwrap();
        assert!(near > v && v > far && far < 1e-5);
        assert!(kernel(&[0.0], &[0.0, 1.0], &h).is_err());
    }

    #[test]
    fn empty_model_is_prior() {
        let m = GpModel::fit(
            3,
            &[],
            &[],
            HyperChoice::Fixed(KernelHyper::isotropic(3, 0.5, 2.0, 1e-6)),
        )
        .unwrap();
        assert_eq!(m.posterior(&[0.1, 0.2, 0.3]).unwrap(), (0.0, 2.0));
    }

    #[test]
    fn single_point_interpolates() {
        let m = GpModel::fit(2, &[vec![0.2, 0.7]], &[3.5], HyperChoice::Fixed(unit(2, JITTER_FLOOR))).unwrap();
        let (mu, var) = m.posterior(&[0.2, 0.7]).unwrap();
        assert!((mu - 3.5).abs() < 1e-6);
        assert!(var < 1e-6);
    }

    #[test]
    fn far_points_revert_to_prior() {
        let xs = vec![vec![0.0, 0.0], vec![0.1, 0.2]];
        let h = KernelHyper::isotropic(2, 0.1, 1.5, 1e-6);
        let m = GpModel::fit(2, &xs, &[1.0, -1.0], HyperChoice::Fixed(h)).unwrap();
        let (mu, var) = m.posterior(&[1.2, 1.2]).unwrap();
        assert!((var - 1.5).abs() < 1e-6);
        assert!((mu - m.mean_constant()).abs() < 1e-6);
    }

    #[test]
    fn duplicates_are_averaged() {
        let xs = vec![vec![0.5], vec![0.5], vec![0.1]];
        let m = GpModel::fit(1, &xs, &[1.0, 3.0, 0.0], HyperChoice::Fixed(unit(1, 1e-8))).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.targets(), &[2.0, 0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let h = HyperChoice::Fixed(unit(1, 0.0));
        assert!(GpModel::fit(1, &[vec![0.0]], &[], h.clone()).is_err());
        assert!(matches!(
            GpModel::fit(1, &[vec![f64::NAN]], &[1.0], h.clone()),
            Err(Error::NonFinite(_))
        ));
        let m = GpModel::fit(1, &[vec![0.0]], &[1.0], h).unwrap();
        assert!(m.posterior(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn factor_reconstructs_gram() {
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 8.0, (i * i) as f64 / 64.0]).collect();
        let ys: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let m = GpModel::fit(2, &xs, &ys, HyperChoice::Auto).unwrap();
        let n = m.len();
        let l = m.cholesky_factor();
        let mut frob = 0.0;
        for i in 0..n {
            for j in 0..n {
                let llt: f64 = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum();
                let mut k = kernel(&xs[i], &xs[j], m.hyper()).unwrap();
                if i == j {
                    k += m.diagonal_noise();
                }
                frob += (llt - k).powi(2);
            }
        }
        assert!(frob.sqrt() <= 1e-8);
    }

    #[test]
    fn auto_grid_prefers_longer_scales_for_smooth_data() {
        let xs: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0]).collect();
        let m = GpModel::fit(1, &xs, &ys, HyperChoice::Auto).unwrap();
        assert!(m.hyper().length_scales[0] >= 0.5, "{:?}", m.hyper());
    }
}
