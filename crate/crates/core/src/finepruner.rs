//! The fine-pruning loop, its objective, the two baselines, and selection of
//! the accuracy/sparsity trade-off weight.
//!
//! One outer round:
//!
//! 1. snapshot the network;
//! 2. run a BO round whose objective restores the snapshot, applies a
//!    candidate's mask update, fine-tunes briefly and scores
//!    `validation error - lambda * sparsity`;
//! 3. restore the snapshot, apply the best candidate and fine-tune fully.
//!
//! Candidate evaluation and the final application share the same mask and
//! shuffle streams, so the first `eval_epochs` epochs of step 3 replay the
//! winning evaluation exactly.

use serde::{Deserialize, Serialize};

use crate::bo::{self, BoConfig, EvalRecord, Evaluation};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::nnet::{top1_error, Batch, LayerKind, LayerSpec, MaskedNetwork, NetworkState};
use crate::rng::{self, stream, Rng};
use crate::surgery::{self, PruningBounds, PruningParams};
use crate::train;

/// When masks are recomputed while a candidate is being fine-tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskCadence {
    /// Only once, before fine-tuning starts.
    Once,
    /// Before every epoch; the cooling iteration is the epoch index.
    Epoch,
    /// Before every SGD step; the cooling iteration is the step index.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FinetuneOnly,
    Independent,
    Fineprune,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FinetuneOnly => "finetune_only",
            Mode::Independent => "independent",
            Mode::Fineprune => "fineprune",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune_only" => Ok(Mode::FinetuneOnly),
            "independent" => Ok(Mode::Independent),
            "fineprune" => Ok(Mode::Fineprune),
            other => Err(Error::Argument(format!(
                "unknown mode {other:?}; expected finetune_only, independent or fineprune"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinePruneConfig {
    /// Weight of sparsity against validation error.
    pub lambda: f64,
    pub max_rounds: usize,
    pub bo: BoConfig,
    pub bounds: PruningBounds,
    pub lr: f64,
    pub batch_size: usize,
    /// Fine-tuning epochs for the initial fine-tune and after each prune.
    pub finetune_epochs: usize,
    /// Fine-tuning epochs inside one candidate evaluation.
    pub eval_epochs: usize,
    pub cadence: MaskCadence,
    /// Random-search evaluations that seed the first BO round.
    pub n_init: usize,
    /// Allowed validation-error increase over fine-tuning only, for lambda selection.
    pub tau: f64,
    /// Outer loop stops once both the best objective and the sparsity move
    /// less than these between consecutive rounds.
    pub converge_l_tol: f64,
    pub converge_s_tol: f64,
    pub seed: u64,
}

impl Default for FinePruneConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_rounds: 10,
            bo: BoConfig::default(),
            bounds: PruningBounds::default(),
            lr: 0.001,
            batch_size: 1,
            finetune_epochs: 10,
            eval_epochs: 2,
            cadence: MaskCadence::Epoch,
            n_init: 5,
            tau: 0.02,
            converge_l_tol: 1e-3,
            converge_s_tol: 0.005,
            seed: 0,
        }
    }
}

impl FinePruneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Argument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be finite and > 0, got {}", self.lr));
        }
        if self.max_rounds == 0 || self.bo.budget == 0 || self.finetune_epochs == 0 || self.batch_size == 0 {
            return fail("rounds, BO budget, fine-tune epochs and batch size must all be >= 1".into());
        }
        if self.bo.pool_size == 0 {
            return fail("BO candidate pool must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        self.bounds.validate()
    }
}

/// Standardized splits plus their evaluation batches.
#[derive(Debug, Clone)]
pub struct Task {
    pub splits: Splits,
    validation: Batch,
    test: Batch,
}

impl Task {
    pub fn new(splits: Splits) -> Result<Self> {
        let validation = splits.validation.as_batch()?;
        let test = splits.test.as_batch()?;
        Ok(Self {
            splits,
            validation,
            test,
        })
    }

    pub fn validation_error(&self, net: &MaskedNetwork) -> Result<f64> {
        top1_error(net, [&self.validation])
    }

    pub fn test_error(&self, net: &MaskedNetwork) -> Result<f64> {
        top1_error(net, [&self.test])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub weights: usize,
    pub biases: usize,
    pub remaining_weights: usize,
    pub sparsity: f64,
}

impl LayerReport {
    pub fn parameters_before(&self) -> usize {
        self.weights + self.biases
    }

    pub fn parameters_after(&self) -> usize {
        self.remaining_weights + self.biases
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub best_params: Option<PruningParams>,
    /// Best objective found by this round's BO.
    pub best_l: Option<f64>,
    pub evaluations: usize,
    pub eps_val: f64,
    pub eps_test: f64,
    pub s: f64,
    pub l: f64,
    /// Remaining weights plus biases.
    pub parameters: usize,
    pub remaining_weights: usize,
    pub compression_rate: f64,
    pub layers: Vec<LayerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub lambda: f64,
    pub seed: u64,
    pub network: Vec<LayerSpec>,
    /// State after the initial fine-tune, before any pruning (round 0).
    pub initial: RoundResult,
    pub rounds: Vec<RoundResult>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub total_weights: usize,
    pub total_parameters: usize,
    pub parameters: usize,
    pub compression_rate: f64,
    pub evaluations: usize,
    pub complete: bool,
    pub error: Option<String>,
}

impl RunReport {
    pub fn last(&self) -> &RoundResult {
        self.rounds.last().unwrap_or(&self.initial)
    }
}

/// Display name of layer `index`, e.g. `conv1` or `fc3`.
pub fn layer_name(spec: &LayerSpec, index: usize) -> String {
    match spec.kind {
        LayerKind::Dense { .. } => format!("fc{}", index + 1),
        LayerKind::Conv2d { .. } => format!("conv{}", index + 1),
    }
}

/// `total / remaining`; a fully pruned network reports `total` (as if one
/// weight were left) so the rate stays finite.
pub fn compression_rate(total_weights: usize, remaining_weights: usize) -> f64 {
    total_weights as f64 / remaining_weights.max(1) as f64
}

/// Fine-tunes with masks frozen. Returns the mean loss of the last epoch.
pub fn fine_tune(
    net: &mut MaskedNetwork,
    train_set: &crate::data::Dataset,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    shuffle: &mut Rng,
) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::Argument("fine-tuning needs at least one epoch".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!(
            "learning rate must be finite and > 0, got {lr}"
        )));
    }
    let mut loss = f64::NAN;
    for _ in 0..epochs {
        loss = train::sgd_epoch(net, train_set, lr, batch_size, shuffle)?;
    }
    Ok(loss)
}

/// Applies `params` and fine-tunes for `epochs`, recomputing masks on the
/// configured cadence. With `epochs == 0` this is a single mask update.
fn prune_and_tune(
    net: &mut MaskedNetwork,
    params: &PruningParams,
    epochs: usize,
    task: &Task,
    config: &FinePruneConfig,
    mask_rng: &mut Rng,
    shuffle: &mut Rng,
) -> Result<()> {
    surgery::update_masks(net, params, 0, mask_rng)?;
    let train_set = &task.splits.train;
    let mut step = 0u64;
    for epoch in 0..epochs {
        match config.cadence {
            MaskCadence::Once => {
                train::sgd_epoch(net, train_set, config.lr, config.batch_size, shuffle)?;
            }
            MaskCadence::Epoch => {
                if epoch > 0 {
                    surgery::update_masks(net, params, epoch as u64, mask_rng)?;
                }
                train::sgd_epoch(net, train_set, config.lr, config.batch_size, shuffle)?;
            }
            MaskCadence::Step => {
                use rand::seq::SliceRandom;
                let mut order: Vec<usize> = (0..train_set.len()).collect();
                order.shuffle(shuffle);
                for chunk in order.chunks(config.batch_size) {
                    if step > 0 {
                        surgery::update_masks(net, params, step, mask_rng)?;
                    }
                    net.sgd_step(&train_set.batch(chunk)?, config.lr)?;
                    step += 1;
                }
            }
        }
    }
    Ok(())
}

fn round_streams(seed: u64, round: usize) -> (Rng, Rng) {
    (
        rng::rng_for(seed, &[stream::MASK, round as u64]),
        rng::rng_for(seed, &[stream::FINETUNE, round as u64]),
    )
}

/// Scores `params` from `snapshot`: prune, fine-tune `eval_epochs`, then
/// `l = eps - lambda * s` on the validation split. `net` is restored to
/// `snapshot` before returning, on success and on failure alike.
pub fn evaluate_objective(
    net: &mut MaskedNetwork,
    snapshot: &NetworkState,
    params: &PruningParams,
    task: &Task,
    config: &FinePruneConfig,
    round: usize,
) -> Result<Evaluation> {
    net.restore(snapshot)?;
    let (mut mask_rng, mut shuffle) = round_streams(config.seed, round);
    let result = prune_and_tune(
        net,
        params,
        config.eval_epochs,
        task,
        config,
        &mut mask_rng,
        &mut shuffle,
    )
    .and_then(|_| task.validation_error(net))
    .map(|eps| {
        let s = surgery::sparsity(net);
        Evaluation {
            eps,
            s,
            l: eps - config.lambda * s,
        }
    });
    net.restore(snapshot)?;
    result
}

fn round_result(
    round: usize,
    net: &MaskedNetwork,
    task: &Task,
    lambda: f64,
    best: Option<&EvalRecord>,
    evaluations: usize,
) -> Result<RoundResult> {
    let eps_val = task.validation_error(net)?;
    let eps_test = task.test_error(net)?;
    let s = surgery::sparsity(net);
    let layers = net
        .specs()
        .iter()
        .zip(net.layers())
        .enumerate()
        .map(|(k, (spec, layer))| LayerReport {
            name: layer_name(spec, k),
            weights: layer.weight_count(),
            biases: layer.bias.len(),
            remaining_weights: layer.remaining_count(),
            sparsity: layer.pruned_count() as f64 / layer.weight_count() as f64,
        })
        .collect();
    Ok(RoundResult {
        round,
        best_params: best.and_then(|b| b.x.clone()),
        best_l: best.map(|b| b.l),
        evaluations,
        eps_val,
        eps_test,
        s,
        l: eps_val - lambda * s,
        parameters: net.remaining_parameters(),
        remaining_weights: net.remaining_weights(),
        compression_rate: compression_rate(net.total_weights(), net.remaining_weights()),
        layers,
    })
}

fn finish(
    mode: Mode,
    config: &FinePruneConfig,
    net: &MaskedNetwork,
    initial: RoundResult,
    rounds: Vec<RoundResult>,
    error: Option<String>,
) -> RunReport {
    let last = rounds.last().unwrap_or(&initial);
    RunReport {
        mode,
        lambda: config.lambda,
        seed: config.seed,
        network: net.specs().to_vec(),
        val_accuracy: 1.0 - last.eps_val,
        test_accuracy: 1.0 - last.eps_test,
        total_weights: net.total_weights(),
        total_parameters: net.parameter_count(),
        parameters: last.parameters,
        compression_rate: last.compression_rate,
        evaluations: rounds.iter().map(|r| r.evaluations).sum(),
        complete: error.is_none(),
        error,
        initial,
        rounds,
    }
}

/// Output of a run: the report and the network it describes.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub network: MaskedNetwork,
}

/// Fine-pruning: initial fine-tune, then up to `max_rounds` of
/// {BO over pruning parameters, prune with the best, fine-tune}.
/// Every objective evaluation is passed to `sink` as it happens.
pub fn run_fineprune<S>(config: &FinePruneConfig, pretrained: &MaskedNetwork, task: &Task, sink: S) -> Result<RunOutput>
where
    S: FnMut(&EvalRecord) -> Result<()>,
{
    run_pruning(Mode::Fineprune, config, config.max_rounds, pretrained, task, sink)
}

/// `FinetuneOnly`: the initial fine-tune followed by further fine-tuning
/// rounds (same epoch budget as fine-pruning, no masks), stopping early when
/// validation error stops moving. `Independent`: the initial fine-tune then a
/// single prune-and-fine-tune round.
pub fn run_baseline<S>(
    mode: Mode,
    config: &FinePruneConfig,
    pretrained: &MaskedNetwork,
    task: &Task,
    sink: S,
) -> Result<RunOutput>
where
    S: FnMut(&EvalRecord) -> Result<()>,
{
    match mode {
        Mode::Independent => run_pruning(Mode::Independent, config, 1, pretrained, task, sink),
        Mode::FinetuneOnly => run_finetune_only(config, pretrained, task),
        Mode::Fineprune => Err(Error::Argument("fineprune is not a baseline; use run_fineprune".into())),
    }
}

/// Dispatches on `mode`.
pub fn run_mode<S>(
    mode: Mode,
    config: &FinePruneConfig,
    pretrained: &MaskedNetwork,
    task: &Task,
    sink: S,
) -> Result<RunOutput>
where
    S: FnMut(&EvalRecord) -> Result<()>,
{
    match mode {
        Mode::Fineprune => run_fineprune(config, pretrained, task, sink),
        other => run_baseline(other, config, pretrained, task, sink),
    }
}

fn initial_fine_tune(
    config: &FinePruneConfig,
    pretrained: &MaskedNetwork,
    task: &Task,
) -> Result<(MaskedNetwork, RoundResult)> {
    config.validate()?;
    if pretrained.classes() != task.splits.train.classes() {
        return Err(Error::Argument(format!(
            "network has {} outputs, task has {} classes",
            pretrained.classes(),
            task.splits.train.classes()
        )));
    }
    let mut net = pretrained.clone();
    let (_, mut shuffle) = round_streams(config.seed, 0);
    fine_tune(
        &mut net,
        &task.splits.train,
        config.lr,
        config.finetune_epochs,
        config.batch_size,
        &mut shuffle,
    )?;
    let initial = round_result(0, &net, task, config.lambda, None, 0)?;
    Ok((net, initial))
}

fn run_finetune_only(config: &FinePruneConfig, pretrained: &MaskedNetwork, task: &Task) -> Result<RunOutput> {
    let (mut net, initial) = initial_fine_tune(config, pretrained, task)?;
    let mut rounds: Vec<RoundResult> = Vec::new();
    let mut error = None;
    for t in 1..=config.max_rounds {
        let (_, mut shuffle) = round_streams(config.seed, t);
        let step = fine_tune(
            &mut net,
            &task.splits.train,
            config.lr,
            config.finetune_epochs,
            config.batch_size,
            &mut shuffle,
        )
        .and_then(|_| round_result(t, &net, task, config.lambda, None, 0));
        match step {
            Ok(rr) => {
                let prev = rounds.last().unwrap_or(&initial);
                let converged = (rr.eps_val - prev.eps_val).abs() < config.converge_l_tol;
                rounds.push(rr);
                if converged {
                    break;
                }
            }
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    let report = finish(Mode::FinetuneOnly, config, &net, initial, rounds, error);
    Ok(RunOutput { report, network: net })
}

fn run_pruning<S>(
    mode: Mode,
    config: &FinePruneConfig,
    max_rounds: usize,
    pretrained: &MaskedNetwork,
    task: &Task,
    mut sink: S,
) -> Result<RunOutput>
where
    S: FnMut(&EvalRecord) -> Result<()>,
{
    let (mut net, initial) = initial_fine_tune(config, pretrained, task)?;
    let dim = PruningBounds::dim(net.layers().len());
    let mut rounds: Vec<RoundResult> = Vec::new();
    let mut incumbent: Option<EvalRecord> = None;
    let mut error = None;

    for t in 1..=max_rounds {
        match run_round(config, &mut net, task, t, dim, incumbent.as_ref(), &mut sink) {
            Ok((rr, best)) => {
                let converged = match (rounds.last(), incumbent.as_ref()) {
                    (Some(prev), Some(prev_best)) => {
                        (best.l - prev_best.l).abs() < config.converge_l_tol
                            && (rr.s - prev.s).abs() < config.converge_s_tol
                    }
                    _ => false,
                };
                rounds.push(rr);
                incumbent = Some(best);
                if converged {
                    break;
                }
            }
            Err(e) => {
                error = Some(format!("round {t}: {e}"));
                break;
            }
        }
    }
    let report = finish(mode, config, &net, initial, rounds, error);
    Ok(RunOutput { report, network: net })
}

fn run_round<S>(
    config: &FinePruneConfig,
    net: &mut MaskedNetwork,
    task: &Task,
    round: usize,
    dim: usize,
    incumbent: Option<&EvalRecord>,
    sink: &mut S,
) -> Result<(RoundResult, EvalRecord)>
where
    S: FnMut(&EvalRecord) -> Result<()>,
{
    let snapshot = net.snapshot();
    let bounds = config.bounds;

    // First round: seeded random search. Later rounds: the previous winner,
    // re-scored against the current network.
    let warm_points: Vec<Vec<f64>> = match incumbent {
        None => {
            use rand::Rng as _;
            let mut r = rng::rng_for(config.seed, &[stream::WARM_START]);
            (0..config.n_init.min(config.bo.budget))
                .map(|_| (0..dim).map(|_| r.random::<f64>()).collect())
                .collect()
        }
        Some(prev) => vec![prev.point.clone()],
    };

    let mut objective = |point: &[f64]| -> Result<Evaluation> {
        let params = bounds.denormalize(point)?;
        evaluate_objective(net, &snapshot, &params, task, config, round)
    };

    let mut warm = Vec::with_capacity(warm_points.len());
    for (i, point) in warm_points.into_iter().enumerate() {
        let start = std::time::Instant::now();
        let outcome = objective(&point);
        let wall_s = if config.bo.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let (ev, failed) = match outcome {
            Ok(ev) => (ev, !ev.l.is_finite()),
            Err(_) => (
                Evaluation {
                    eps: f64::NAN,
                    s: f64::NAN,
                    l: f64::INFINITY,
                },
                true,
            ),
        };
        let record = EvalRecord {
            round,
            eval_idx: i,
            x: bounds.denormalize(&point).ok(),
            eps: ev.eps,
            s: ev.s,
            l: ev.l,
            wall_s,
            failed,
            point,
        };
        sink(&record)?;
        warm.push(record);
    }

    let outcome = bo::bo_round(dim, &bounds, &config.bo, round, warm, &mut objective, &mut *sink)?;

    let best = outcome.best;
    let params = bounds.denormalize(&best.point)?;
    net.restore(&snapshot)?;
    let (mut mask_rng, mut shuffle) = round_streams(config.seed, round);
    prune_and_tune(
        net,
        &params,
        config.finetune_epochs,
        task,
        config,
        &mut mask_rng,
        &mut shuffle,
    )?;
    let rr = round_result(round, net, task, config.lambda, Some(&best), outcome.history.len())?;
    Ok((rr, best))
}

/// Outcome of [`select_lambda`].
#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub reference: RunReport,
    pub runs: Vec<(f64, RunOutput, Vec<EvalRecord>)>,
}

/// Runs fine-pruning once per grid value and returns the value whose run
/// compresses most among runs whose validation error is within `tau` of the
/// fine-tuning-only baseline. If no run qualifies, the value with the lowest
/// validation error wins. Ties keep the earlier grid value.
pub fn select_lambda(
    grid: &[f64],
    config: &FinePruneConfig,
    pretrained: &MaskedNetwork,
    task: &Task,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::Argument("lambda grid is empty".into()));
    }
    let reference = run_baseline(Mode::FinetuneOnly, config, pretrained, task, |_| Ok(()))?.report;
    let mut runs = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = FinePruneConfig {
            lambda,
            ..config.clone()
        };
        let mut records = Vec::new();
        let out = run_fineprune(&cfg, pretrained, task, |r| {
            records.push(r.clone());
            Ok(())
        })?;
        runs.push((lambda, out, records));
    }
    let reports: Vec<(f64, &RunReport)> = runs.iter().map(|(l, o, _)| (*l, &o.report)).collect();
    let lambda = pick_lambda(&reports, reference.last().eps_val, config.tau);
    Ok(LambdaSelection {
        lambda,
        reference,
        runs,
    })
}

/// Filter-then-argmax rule of [`select_lambda`], on finished reports.
pub fn pick_lambda(reports: &[(f64, &RunReport)], reference_eps: f64, tau: f64) -> f64 {
    let within = |r: &RunReport| r.last().eps_val - reference_eps <= tau;
    let mut best: Option<(f64, &RunReport)> = None;
    for &(lambda, r) in reports.iter().filter(|(_, r)| within(r)) {
        if best.is_none_or(|(_, b)| r.compression_rate > b.compression_rate) {
            best = Some((lambda, r));
        }
    }
    if let Some((lambda, _)) = best {
        return lambda;
    }
    let mut fallback = reports[0];
    for &(lambda, r) in &reports[1..] {
        if r.last().eps_val < fallback.1.last().eps_val {
            fallback = (lambda, r);
        }
    }
    fallback.0
}
