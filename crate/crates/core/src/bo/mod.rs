//! Expected-improvement Bayesian optimization over the unit hypercube.

mod lowdisc;

pub use lowdisc::Kronecker;

use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gp::{GpModel, HyperChoice};
use crate::rng::{self, stream};
use crate::surgery::{PruningBounds, PruningParams};

/// Below this posterior standard deviation EI collapses to plain improvement.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Outcome of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Validation top-1 error.
    pub eps: f64,
    /// Sparsity.
    pub s: f64,
    /// Objective value, lower is better.
    pub l: f64,
}

/// One logged evaluation. Serializes to the flat JSONL schema
/// `{"round","eval_idx","x","eps","s","l","wall_s","failed"}`; non-finite
/// numbers (failed evaluations) are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub eval_idx: usize,
    pub x: Option<PruningParams>,
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_nan")]
    pub eps: f64,
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_nan")]
    pub s: f64,
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_inf")]
    pub l: f64,
    pub wall_s: f64,
    pub failed: bool,
    /// Normalized search point; not part of the log schema.
    #[serde(skip)]
    pub point: Vec<f64>,
}

impl EvalRecord {
    pub fn is_usable(&self) -> bool {
        !self.failed && self.l.is_finite()
    }
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn null_as_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoConfig {
    /// Maximum evaluations per round, warm-start records included.
    pub budget: usize,
    pub pool_size: usize,
    pub perturbations: usize,
    pub perturb_sigma: f64,
    /// Consecutive non-improving evaluations before the round stops early.
    pub patience: usize,
    /// Minimum decrease of the best objective that counts as improvement.
    pub improve_tol: f64,
    pub hyper: HyperChoice,
    pub seed: u64,
    /// Store wall-clock durations in records; off gives byte-reproducible logs.
    pub record_timing: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 50,
            pool_size: 2048,
            perturbations: 32,
            perturb_sigma: 0.05,
            patience: 10,
            improve_tol: 1e-4,
            hyper: HyperChoice::Auto,
            seed: 0,
            record_timing: true,
        }
    }
}

/// Result of [`bo_round`].
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub best: EvalRecord,
    pub history: Vec<EvalRecord>,
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form `E[max(0, best - f)]` for `f ~ N(mean, sd^2)`.
pub fn expected_improvement_closed_form(mean: f64, sd: f64, best: f64) -> f64 {
    if sd <= SIGMA_FLOOR {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sd;
    (sd * (z * std_normal_cdf(z) + std_normal_pdf(z))).max(0.0)
}

/// Expected improvement (minimization) of `model` at `point` over `best`.
pub fn expected_improvement(model: &GpModel, point: &[f64], best: f64) -> Result<f64> {
    if model.is_empty() {
        return Err(Error::State(
            "expected improvement needs at least one observation".into(),
        ));
    }
    let (mean, var) = model.posterior(point)?;
    Ok(expected_improvement_closed_form(mean, var.sqrt(), best))
}

/// Candidate set scored by [`propose_candidate`]: `pool_size` shifted
/// Kronecker points followed by Gaussian perturbations of the incumbent,
/// clipped to the cube.
pub fn candidate_pool(dim: usize, incumbent: Option<&[f64]>, config: &BoConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut pool = Kronecker::new(dim, rng::derive(seed, &[stream::POOL])).points(config.pool_size);
    if let Some(inc) = incumbent {
        let mut r = rng::rng_for(seed, &[stream::PERTURB]);
        let normal = Normal::new(0.0, config.perturb_sigma).expect("sigma is finite and >= 0");
        for _ in 0..config.perturbations {
            pool.push(
                inc.iter()
                    .map(|&v| (v + normal.sample(&mut r)).clamp(0.0, 1.0))
                    .collect(),
            );
        }
    }
    pool
}

/// EI arg-max over the candidate pool; ties keep the lowest pool index.
pub fn propose_candidate(
    model: &GpModel,
    incumbent: &[f64],
    best: f64,
    config: &BoConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut pool = candidate_pool(model.dim(), Some(incumbent), config, seed);
    let mut best_idx = 0;
    let mut best_ei = f64::NEG_INFINITY;
    for (i, p) in pool.iter().enumerate() {
        let ei = expected_improvement(model, p, best)?;
        if ei > best_ei {
            best_ei = ei;
            best_idx = i;
        }
    }
    Ok(pool.swap_remove(best_idx))
}

/// One Bayesian-optimization round: repeatedly fit the GP to the usable
/// history, propose the EI maximizer, evaluate it and log it.
///
/// `warm_start` records seed the model and count against `config.budget`.
/// A failed evaluation is recorded with `l = +inf`, kept out of the GP, and
/// the loop continues. The round ends at the budget or after
/// `config.patience` consecutive evaluations that do not improve the best
/// objective by more than `config.improve_tol`.
pub fn bo_round<F, S>(
    dim: usize,
    bounds: &PruningBounds,
    config: &BoConfig,
    round: usize,
    warm_start: Vec<EvalRecord>,
    mut objective: F,
    mut sink: S,
) -> Result<RoundOutcome>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
    S: FnMut(&EvalRecord) -> Result<()>,
{
    if config.budget == 0 {
        return Err(Error::Argument("BO budget must be >= 1".into()));
    }
    if let Some(r) = warm_start.iter().find(|r| r.point.len() != dim) {
        return Err(Error::Argument(format!(
            "warm-start point of dimension {} for a {dim}-dimensional search",
            r.point.len()
        )));
    }
    let mut history = warm_start;
    history.truncate(config.budget);
    let mut stall = 0usize;
    let mut fallback_points = 0usize;
    let mut proposals = 0u64;

    while history.len() < config.budget {
        let usable: Vec<&EvalRecord> = history.iter().filter(|r| r.is_usable()).collect();
        let point = if usable.is_empty() {
            // nothing to model yet: walk the seeded quasi-random sequence
            let p = Kronecker::new(dim, rng::derive(config.seed, &[stream::POOL, round as u64])).point(fallback_points);
            fallback_points += 1;
            p
        } else {
            let xs: Vec<Vec<f64>> = usable.iter().map(|r| r.point.clone()).collect();
            let ys: Vec<f64> = usable.iter().map(|r| r.l).collect();
            let model = GpModel::fit(dim, &xs, &ys, config.hyper.clone())?;
            let inc = incumbent(&history).expect("usable history is non-empty");
            let seed = rng::derive(config.seed, &[round as u64, proposals]);
            propose_candidate(&model, &inc.point, inc.l, config, seed)?
        };
        proposals += 1;

        let prior_best = incumbent(&history).map(|r| r.l);
        let start = Instant::now();
        let outcome = objective(&point);
        let wall_s = if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let record = match outcome {
            Ok(ev) => EvalRecord {
                round,
                eval_idx: history.len(),
                x: bounds.denormalize(&point).ok(),
                eps: ev.eps,
                s: ev.s,
                l: ev.l,
                wall_s,
                failed: !ev.l.is_finite(),
                point,
            },
            Err(_) => EvalRecord {
                round,
                eval_idx: history.len(),
                x: bounds.denormalize(&point).ok(),
                eps: f64::NAN,
                s: f64::NAN,
                l: f64::INFINITY,
                wall_s,
                failed: true,
                point,
            },
        };
        sink(&record)?;
        let improved = record.is_usable() && prior_best.is_none_or(|b| record.l < b - config.improve_tol);
        history.push(record);
        stall = if improved { 0 } else { stall + 1 };
        if stall >= config.patience {
            break;
        }
    }

    let best = incumbent(&history)
        .cloned()
        .ok_or_else(|| Error::State(format!("every evaluation in round {round} failed")))?;
    Ok(RoundOutcome { best, history })
}

/// Lowest-objective usable record; earliest wins ties.
pub fn incumbent(history: &[EvalRecord]) -> Option<&EvalRecord> {
    history
        .iter()
        .filter(|r| r.is_usable())
        .fold(None, |best: Option<&EvalRecord>, r| match best {
            Some(b) if b.l <= r.l => Some(b),
            _ => Some(r),
        })
}
