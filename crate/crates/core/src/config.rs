//! Flat key/value run configuration.
//!
//! Keys are dotted (`bo.budget`, `finetune.lr`). A TOML file may spell them
//! either as dotted keys or as `[section]` tables; both flatten to the same
//! key. Unknown keys are rejected with the closest known key as a hint.
//!
//! | key | default | |
//! |---|---|---|
//! | `seed` | 0 | master seed; `--seed` wins, `FINEPRUNE_SEED` is the fallback |
//! | `lambda` | 1.0 | sparsity weight in `eps - lambda * s` |
//! | `select.grid` | `[]` | if non-empty, fineprune runs once per value and keeps the selected one |
//! | `select.tau` | 0.02 | tolerated validation-error increase for selection |
//! | `outer.max_rounds` | 10 | |
//! | `outer.l_tol`, `outer.s_tol` | 1e-3, 0.005 | early-stop thresholds |
//! | `bo.budget` | 50 | evaluations per round, warm start included |
//! | `bo.n_init` | 5 | random-search evaluations before the first round |
//! | `bo.pool_size` | 2048 | |
//! | `bo.perturbations`, `bo.perturb_sigma` | 32, 0.05 | |
//! | `bo.patience`, `bo.improve_tol` | 10, 1e-4 | |
//! | `bo.hyper` | `"auto"` | or `"fixed"` with `bo.length_scale`, `bo.signal_variance`, `bo.noise_variance` |
//! | `finetune.lr` | 0.001 | |
//! | `finetune.epochs` | 10 | |
//! | `finetune.eval_epochs` | 2 | epochs per candidate evaluation |
//! | `finetune.batch_size` | 1 | |
//! | `surgery.a_max`, `surgery.m_max` | 3.0, 1.0 | threshold bounds in per-layer std units |
//! | `surgery.p0_min`, `surgery.p0_max` | 0.05, 1.0 | |
//! | `surgery.kappa_max` | 10.0 | |
//! | `surgery.cadence` | `"epoch"` | `"once"`, `"epoch"` or `"step"` |
//! | `data.source` | `"synthetic"` | or `"csv"` |
//! | `data.classes` | 3 | target classes (synthetic) |
//! | `data.source_classes` | 6 | pretraining classes (synthetic) |
//! | `data.per_class` | 100 | |
//! | `data.dims` | 2 | |
//! | `data.spread` | 0.35 | blob standard deviation |
//! | `data.csv_path` | | target CSV (csv source) |
//! | `data.source_csv_path` | | optional pretraining CSV; without it the net starts from random init |
//! | `data.label_column` | `"label"` | |
//! | `data.split` | `[0.5, 0.25, 0.25]` | train/validation/test |
//! | `net.hidden` | `[64, 64]` | hidden widths, ReLU |
//! | `pretrain.epochs`, `pretrain.lr`, `pretrain.batch_size` | 20, 0.01, 8 | |
//! | `log.timing` | true | false writes `wall_s = 0` so logs are byte-reproducible |

use std::path::{Path, PathBuf};

use crate::bo::BoConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::finepruner::{FinePruneConfig, MaskCadence, Task};
use crate::gp::{HyperChoice, KernelHyper};
use crate::nnet::{Activation, LayerSpec, MaskedNetwork};
use crate::rng::{self, stream};
use crate::surgery::PruningBounds;

pub const KEYS: &[&str] = &[
    "seed",
    "lambda",
    "select.grid",
    "select.tau",
    "outer.max_rounds",
    "outer.l_tol",
    "outer.s_tol",
    "bo.budget",
    "bo.n_init",
    "bo.pool_size",
    "bo.perturbations",
    "bo.perturb_sigma",
    "bo.patience",
    "bo.improve_tol",
    "bo.hyper",
    "bo.length_scale",
    "bo.signal_variance",
    "bo.noise_variance",
    "finetune.lr",
    "finetune.epochs",
    "finetune.eval_epochs",
    "finetune.batch_size",
    "surgery.a_max",
    "surgery.m_max",
    "surgery.p0_min",
    "surgery.p0_max",
    "surgery.kappa_max",
    "surgery.cadence",
    "data.source",
    "data.classes",
    "data.source_classes",
    "data.per_class",
    "data.dims",
    "data.spread",
    "data.csv_path",
    "data.source_csv_path",
    "data.label_column",
    "data.split",
    "net.hidden",
    "pretrain.epochs",
    "pretrain.lr",
    "pretrain.batch_size",
    "log.timing",
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        source_classes: usize,
        per_class: usize,
        dims: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
        source_path: Option<PathBuf>,
        label_column: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub fineprune: FinePruneConfig,
    pub lambda_grid: Vec<f64>,
    pub data: DataSource,
    pub split: (f64, f64, f64),
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fineprune: FinePruneConfig {
                bo: BoConfig::default(),
                ..FinePruneConfig::default()
            },
            lambda_grid: Vec::new(),
            data: DataSource::Synthetic {
                classes: 3,
                source_classes: 6,
                per_class: 100,
                dims: 2,
                spread: 0.35,
            },
            split: (0.5, 0.25, 0.25),
            hidden: vec![64, 64],
            pretrain_epochs: 20,
            pretrain_lr: 0.01,
            pretrain_batch_size: 8,
        }
    }
}

/// Raw settings before cross-field checks. Collects every key so that the
/// data-source fields can be resolved once at the end.
#[derive(Debug, Clone)]
struct Draft {
    cfg: RunConfig,
    source: String,
    classes: usize,
    source_classes: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    csv_path: Option<PathBuf>,
    source_csv_path: Option<PathBuf>,
    label_column: String,
    hyper: String,
    length_scale: f64,
    signal_variance: f64,
    noise_variance: f64,
}

impl Draft {
    fn new() -> Self {
        Self {
            cfg: RunConfig::default(),
            source: "synthetic".into(),
            classes: 3,
            source_classes: 6,
            per_class: 100,
            dims: 2,
            spread: 0.35,
            csv_path: None,
            source_csv_path: None,
            label_column: "label".into(),
            hyper: "auto".into(),
            length_scale: 0.5,
            signal_variance: 1.0,
            noise_variance: 1e-4,
        }
    }

    fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let f = &mut self.cfg.fineprune;
        match key {
            "seed" => self.cfg.seed = uint(key, v, 0)? as u64,
            "lambda" => f.lambda = float(key, v, 0.0, f64::INFINITY)?,
            "select.grid" => {
                let grid = floats(key, v)?;
                if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
                    return Err(range(key, format!("values must be finite and >= 0, got {bad}")));
                }
                self.cfg.lambda_grid = grid;
            }
            "select.tau" => f.tau = float(key, v, 0.0, 1.0)?,
            "outer.max_rounds" => f.max_rounds = uint(key, v, 1)?,
            "outer.l_tol" => f.converge_l_tol = float(key, v, 0.0, f64::INFINITY)?,
            "outer.s_tol" => f.converge_s_tol = float(key, v, 0.0, f64::INFINITY)?,
            "bo.budget" => f.bo.budget = uint(key, v, 1)?,
            "bo.n_init" => f.n_init = uint(key, v, 0)?,
            "bo.pool_size" => f.bo.pool_size = uint(key, v, 1)?,
            "bo.perturbations" => f.bo.perturbations = uint(key, v, 0)?,
            "bo.perturb_sigma" => f.bo.perturb_sigma = float(key, v, 0.0, f64::INFINITY)?,
            "bo.patience" => f.bo.patience = uint(key, v, 1)?,
            "bo.improve_tol" => f.bo.improve_tol = float(key, v, 0.0, f64::INFINITY)?,
            "bo.hyper" => self.hyper = choice(key, v, &["auto", "fixed"])?,
            "bo.length_scale" => self.length_scale = positive(key, v)?,
            "bo.signal_variance" => self.signal_variance = positive(key, v)?,
            "bo.noise_variance" => self.noise_variance = float(key, v, 0.0, f64::INFINITY)?,
            "finetune.lr" => f.lr = positive(key, v)?,
            "finetune.epochs" => f.finetune_epochs = uint(key, v, 1)?,
            "finetune.eval_epochs" => f.eval_epochs = uint(key, v, 0)?,
            "finetune.batch_size" => f.batch_size = uint(key, v, 1)?,
            "surgery.a_max" => f.bounds.a_max = float(key, v, 0.0, f64::INFINITY)?,
            "surgery.m_max" => f.bounds.m_max = float(key, v, 0.0, f64::INFINITY)?,
            "surgery.p0_min" => f.bounds.p0_min = float(key, v, f64::MIN_POSITIVE, 1.0)?,
            "surgery.p0_max" => f.bounds.p0_max = float(key, v, f64::MIN_POSITIVE, 1.0)?,
            "surgery.kappa_max" => f.bounds.kappa_max = float(key, v, 0.0, f64::INFINITY)?,
            "surgery.cadence" => {
                f.cadence = match choice(key, v, &["once", "epoch", "step"])?.as_str() {
                    "once" => MaskCadence::Once,
                    "epoch" => MaskCadence::Epoch,
                    _ => MaskCadence::Step,
                }
            }
            "data.source" => self.source = choice(key, v, &["synthetic", "csv"])?,
            "data.classes" => self.classes = uint(key, v, 2)?,
            "data.source_classes" => self.source_classes = uint(key, v, 2)?,
            "data.per_class" => self.per_class = uint(key, v, 4)?,
            "data.dims" => self.dims = uint(key, v, 2)?,
            "data.spread" => self.spread = float(key, v, 0.0, f64::INFINITY)?,
            "data.csv_path" => self.csv_path = Some(string(key, v)?.into()),
            "data.source_csv_path" => self.source_csv_path = Some(string(key, v)?.into()),
            "data.label_column" => self.label_column = string(key, v)?,
            "data.split" => {
                let r = floats(key, v)?;
                if r.len() != 3
                    || r.iter().any(|x| x.is_nan() || *x <= 0.0)
                    || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return Err(range(
                        key,
                        format!("expected three positive ratios summing to 1, got {r:?}"),
                    ));
                }
                self.cfg.split = (r[0], r[1], r[2]);
            }
            "net.hidden" => {
                let widths = match v {
                    toml::Value::Array(items) => items.iter().map(|x| uint(key, x, 1)).collect::<Result<Vec<_>>>()?,
                    _ => return Err(kind(key, "an array of integers", v)),
                };
                self.cfg.hidden = widths;
            }
            "pretrain.epochs" => self.cfg.pretrain_epochs = uint(key, v, 0)?,
            "pretrain.lr" => self.cfg.pretrain_lr = positive(key, v)?,
            "pretrain.batch_size" => self.cfg.pretrain_batch_size = uint(key, v, 1)?,
            "log.timing" => match v {
                toml::Value::Boolean(b) => f.bo.record_timing = *b,
                _ => return Err(kind(key, "a boolean", v)),
            },
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunConfig> {
        self.cfg.data = match self.source.as_str() {
            "synthetic" => DataSource::Synthetic {
                classes: self.classes,
                source_classes: self.source_classes,
                per_class: self.per_class,
                dims: self.dims,
                spread: self.spread,
            },
            _ => DataSource::Csv {
                path: self
                    .csv_path
                    .ok_or_else(|| Error::Config("data.csv_path is required when data.source = \"csv\"".into()))?,
                source_path: self.source_csv_path,
                label_column: self.label_column,
            },
        };
        self.cfg.fineprune.bo.hyper = match self.hyper.as_str() {
            "auto" => HyperChoice::Auto,
            _ => HyperChoice::Fixed(KernelHyper::isotropic(
                PruningBounds::dim(self.cfg.hidden.len() + 1),
                self.length_scale,
                self.signal_variance,
                self.noise_variance,
            )),
        };
        let b = &self.cfg.fineprune.bounds;
        if b.p0_min > b.p0_max {
            return Err(Error::Config(format!(
                "surgery.p0_min ({}) must not exceed surgery.p0_max ({})",
                b.p0_min, b.p0_max
            )));
        }
        self.cfg.fineprune.seed = self.cfg.seed;
        self.cfg.fineprune.bo.seed = self.cfg.seed;
        self.cfg
            .fineprune
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.cfg)
    }
}

fn range(key: &str, detail: String) -> Error {
    Error::Config(format!("{key}: {detail}"))
}

fn kind(key: &str, expected: &str, got: &toml::Value) -> Error {
    Error::Config(format!("{key}: expected {expected}, got {got}"))
}

fn unknown_key(key: &str) -> Error {
    let nearest = KEYS
        .iter()
        .map(|k| (strsim::damerau_levenshtein(key, k), *k))
        .min()
        .map(|(_, k)| k)
        .unwrap_or("seed");
    Error::Config(format!("unknown config key `{key}`; did you mean `{nearest}`?"))
}

fn float(key: &str, v: &toml::Value, min: f64, max: f64) -> Result<f64> {
    let x = match v {
        toml::Value::Float(x) => *x,
        toml::Value::Integer(i) => *i as f64,
        _ => return Err(kind(key, "a number", v)),
    };
    if !(x.is_finite() && x >= min && x <= max) {
        return Err(range(key, format!("{x} is outside [{min}, {max}]")));
    }
    Ok(x)
}

fn positive(key: &str, v: &toml::Value) -> Result<f64> {
    let x = float(key, v, 0.0, f64::INFINITY)?;
    if x == 0.0 {
        return Err(range(key, "must be > 0".into()));
    }
    Ok(x)
}

fn uint(key: &str, v: &toml::Value, min: usize) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= min as i64 => Ok(*i as usize),
        toml::Value::Integer(i) => Err(range(key, format!("{i} is below the minimum {min}"))),
        _ => Err(kind(key, "an integer", v)),
    }
}

fn floats(key: &str, v: &toml::Value) -> Result<Vec<f64>> {
    match v {
        toml::Value::Array(items) => items.iter().map(|x| float(key, x, f64::MIN, f64::MAX)).collect(),
        _ => Err(kind(key, "an array of numbers", v)),
    }
}

fn string(key: &str, v: &toml::Value) -> Result<String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        _ => Err(kind(key, "a string", v)),
    }
}

fn choice(key: &str, v: &toml::Value, options: &[&str]) -> Result<String> {
    let s = string(key, v)?;
    if options.contains(&s.as_str()) {
        Ok(s)
    } else {
        Err(range(key, format!("{s:?} is not one of {options:?}")))
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses the right-hand side of a `--set key=value` override. Anything that
/// is not a TOML literal is taken as a bare string.
fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not of the form key=value")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

impl RunConfig {
    /// Builds a config from TOML text, then `overrides` (`key=value`), then
    /// an explicit seed. `env_seed` is used only when neither the text nor
    /// the overrides set `seed`.
    pub fn from_sources(text: &str, overrides: &[String], seed: Option<u64>, env_seed: Option<u64>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {}", e.message())))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        for raw in overrides {
            entries.push(parse_override(raw)?);
        }
        let mut draft = Draft::new();
        let mut seed_given = false;
        for (key, value) in &entries {
            seed_given |= key == "seed";
            draft.set(key, value)?;
        }
        match (seed, env_seed) {
            (Some(s), _) => draft.cfg.seed = s,
            (None, Some(s)) if !seed_given => draft.cfg.seed = s,
            _ => {}
        }
        draft.finish()
    }

    pub fn from_file(path: &Path, overrides: &[String], seed: Option<u64>, env_seed: Option<u64>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_sources(&text, overrides, seed, env_seed)
    }
}

/// Layer stack `in -> hidden... -> out`, ReLU hidden layers.
pub fn dense_stack(input: usize, hidden: &[usize], output: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden {
        specs.push(LayerSpec::dense(prev, h, Activation::Relu));
        prev = h;
    }
    specs.push(LayerSpec::dense(prev, output, Activation::Softmax));
    specs
}

/// Loads or generates the data, splits and standardizes the target, and
/// pretrains the network on the source task.
pub fn prepare(cfg: &RunConfig) -> Result<(MaskedNetwork, Task)> {
    let data_seed = rng::derive(cfg.seed, &[stream::DATA]);
    let (source, target): (Option<Dataset>, Dataset) = match &cfg.data {
        DataSource::Synthetic {
            classes,
            source_classes,
            per_class,
            dims,
            spread,
        } => {
            let (s, t) = data::blob_transfer_pair(*source_classes, *classes, *per_class, *dims, *spread, data_seed)?;
            (Some(s), t)
        }
        DataSource::Csv {
            path,
            source_path,
            label_column,
        } => {
            let target = data::load_csv(path, label_column)?;
            let source = source_path
                .as_deref()
                .map(|p| data::load_csv(p, label_column))
                .transpose()?;
            if let Some(s) = &source {
                if s.dims() != target.dims() {
                    return Err(Error::Argument(format!(
                        "source CSV has {} features, target CSV has {}",
                        s.dims(),
                        target.dims()
                    )));
                }
            }
            (source, target)
        }
    };
    let splits = data::split(&target, cfg.split, rng::derive(cfg.seed, &[stream::SPLIT]))?;
    let pretrain_seed = rng::derive(cfg.seed, &[stream::PRETRAIN]);
    let net = match source {
        Some(source) => {
            let source = data::Standardizer::fit(&source).apply(&source);
            let specs = dense_stack(source.dims(), &cfg.hidden, source.classes());
            data::pretrain(
                specs,
                &source,
                target.classes(),
                cfg.pretrain_epochs,
                cfg.pretrain_lr,
                cfg.pretrain_batch_size,
                pretrain_seed,
            )?
        }
        None => MaskedNetwork::init(dense_stack(target.dims(), &cfg.hidden, target.classes()), pretrain_seed)?,
    };
    Ok((net, Task::new(splits.standardized())?))
}
