//! Prune/splice mask updates driven by magnitude thresholds.
//!
//! Each prunable layer `k` has a threshold `a_k` and a margin `m_k`, both in
//! units of the layer's weight standard deviation `sigma_k`. With
//! `b_k = a_k + m_k`:
//!
//! * `|w| <  a_k * sigma_k` prunes the connection,
//! * `|w| >= b_k * sigma_k` splices it back (or keeps it),
//! * anything in between keeps its current mask state.
//!
//! Whether a layer is touched at all on a given call is a Bernoulli draw with
//! the cooling probability `p0 / (1 + kappa * iter)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::MaskedNetwork;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerThreshold {
    /// Prune threshold, in standard deviations.
    pub a: f64,
    /// Splice margin above `a`, in standard deviations.
    pub m: f64,
}

/// One point of the pruning search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningParams {
    pub layers: Vec<LayerThreshold>,
    pub p0: f64,
    pub kappa: f64,
}

/// Box bounds of the search space. Thresholds and margins share one range
/// across layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningBounds {
    pub a_max: f64,
    pub m_max: f64,
    pub p0_min: f64,
    pub p0_max: f64,
    pub kappa_max: f64,
}

impl Default for PruningBounds {
    fn default() -> Self {
        Self {
            a_max: 3.0,
            m_max: 1.0,
            p0_min: 0.05,
            p0_max: 1.0,
            kappa_max: 10.0,
        }
    }
}

impl PruningBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a_max >= 0.0
            && self.m_max >= 0.0
            && self.kappa_max >= 0.0
            && self.p0_min > 0.0
            && self.p0_min <= self.p0_max
            && self.p0_max <= 1.0
            && [self.a_max, self.m_max, self.kappa_max].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid pruning bounds {self:?}")))
        }
    }

    /// Search-space dimensionality for `layers` prunable layers.
    pub fn dim(layers: usize) -> usize {
        2 * layers + 2
    }

    /// `(lower, upper)` per normalized coordinate, in the order
    /// `a_0, m_0, a_1, m_1, ..., p0, kappa`.
    fn ranges(&self, layers: usize) -> Vec<(f64, f64)> {
        let mut r = Vec::with_capacity(Self::dim(layers));
        for _ in 0..layers {
            r.push((0.0, self.a_max));
            r.push((0.0, self.m_max));
        }
        r.push((self.p0_min, self.p0_max));
        r.push((0.0, self.kappa_max));
        r
    }

    /// The all-lower-bound corner: no pruning, slowest-firing gate.
    pub fn lower(&self, layers: usize) -> PruningParams {
        self.denormalize(&vec![0.0; Self::dim(layers)])
            .expect("corner is in range")
    }

    pub fn upper(&self, layers: usize) -> PruningParams {
        self.denormalize(&vec![1.0; Self::dim(layers)])
            .expect("corner is in range")
    }

    /// Affine map of `params` onto `[0, 1]^d`. Degenerate (zero-width)
    /// ranges map to 0.
    pub fn normalize(&self, params: &PruningParams) -> Result<Vec<f64>> {
        let ranges = self.ranges(params.layers.len());
        let raw = params.to_vec();
        raw.iter()
            .zip(&ranges)
            .enumerate()
            .map(|(i, (&v, &(lo, hi)))| {
                let slack = 1e-12 * hi.abs().max(1.0);
                if !(v >= lo - slack && v <= hi + slack) {
                    return Err(Error::Argument(format!(
                        "pruning parameter {i} = {v} outside [{lo}, {hi}]"
                    )));
                }
                Ok(if hi > lo {
                    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.0
                })
            })
            .collect()
    }

    pub fn denormalize(&self, point: &[f64]) -> Result<PruningParams> {
        if point.len() < 2 || !point.len().is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "normalized point must have 2L + 2 components, got {}",
                point.len()
            )));
        }
        let layers = (point.len() - 2) / 2;
        let ranges = self.ranges(layers);
        let raw = point
            .iter()
            .zip(&ranges)
            .enumerate()
            .map(|(i, (&u, &(lo, hi)))| {
                if !(0.0..=1.0).contains(&u) {
                    return Err(Error::Argument(format!(
                        "normalized component {i} = {u} outside [0, 1]"
                    )));
                }
                Ok(lo + u * (hi - lo))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PruningParams::from_vec(&raw))
    }
}

impl PruningParams {
    /// Flattened as `a_0, m_0, ..., p0, kappa`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.layers.iter().flat_map(|l| [l.a, l.m]).collect();
        v.push(self.p0);
        v.push(self.kappa);
        v
    }

    fn from_vec(raw: &[f64]) -> Self {
        let n = raw.len() - 2;
        Self {
            layers: raw[..n]
                .chunks(2)
                .map(|c| LayerThreshold { a: c[0], m: c[1] })
                .collect(),
            p0: raw[n],
            kappa: raw[n + 1],
        }
    }

    /// Thresholds that never prune and a gate that always fires.
    pub fn no_pruning(layers: usize) -> Self {
        Self {
            layers: vec![LayerThreshold { a: 0.0, m: 0.0 }; layers],
            p0: 1.0,
            kappa: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub updated: bool,
    pub pruned: usize,
    pub spliced: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskUpdateStats {
    pub layers: Vec<LayerUpdate>,
    pub sparsity: f64,
}

/// Probability that a layer's mask is recomputed at iteration `iter`.
pub fn cooling_probability(p0: f64, kappa: f64, iter: u64) -> Result<f64> {
    if !(p0 > 0.0 && p0 <= 1.0) {
        return Err(Error::Argument(format!("p0 must lie in (0, 1], got {p0}")));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Argument(format!("kappa must be finite and >= 0, got {kappa}")));
    }
    Ok(p0 / (1.0 + kappa * iter as f64))
}

/// Population standard deviation of the stored weights, masked ones included.
pub fn weight_std(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn update_masks(
    net: &mut MaskedNetwork,
    params: &PruningParams,
    iter: u64,
    rng: &mut Rng,
) -> Result<MaskUpdateStats> {
    if params.layers.len() != net.layers().len() {
        return Err(Error::Argument(format!(
            "pruning params cover {} layers, network has {}",
            params.layers.len(),
            net.layers().len()
        )));
    }
    let p = cooling_probability(params.p0, params.kappa, iter)?;
    if let Some(bad) = params.layers.iter().find(|t| !(t.a >= 0.0 && t.m >= 0.0)) {
        return Err(Error::Argument(format!("thresholds must be >= 0, got {bad:?}")));
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for (layer, t) in net.layers_mut().iter_mut().zip(&params.layers) {
        // one draw per layer per call, whether or not it fires
        let fire = rng.random::<f64>() < p;
        let (mut pruned, mut spliced) = (0, 0);
        if fire {
            let sigma = weight_std(&layer.weights);
            let (lo, hi) = (t.a * sigma, (t.a + t.m) * sigma);
            for (w, m) in layer.weights.iter().zip(layer.mask.iter_mut()) {
                let mag = w.abs();
                if mag < lo {
                    if *m {
                        pruned += 1;
                    }
                    *m = false;
                } else if mag >= hi {
                    if !*m {
                        spliced += 1;
                    }
                    *m = true;
                }
            }
        }
        layers.push(LayerUpdate {
            updated: fire,
            pruned,
            spliced,
            sparsity: layer.pruned_count() as f64 / layer.weight_count() as f64,
        });
    }
    Ok(MaskUpdateStats {
        layers,
        sparsity: sparsity(net),
    })
}

/// Fraction of weight entries whose mask is zero. Biases are not counted.
pub fn sparsity(net: &MaskedNetwork) -> f64 {
    let total = net.total_weights();
    (total - net.remaining_weights()) as f64 / total as f64
}
