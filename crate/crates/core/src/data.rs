//! Datasets, stratified splits, CSV loading and production of the
//! pre-trained starting network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Batch, LayerKind, LayerSpec, MaskedNetwork};
use crate::rng::{self, stream};
use crate::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Csv,
}

/// Row-major feature matrix with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dims: usize,
    labels: Vec<usize>,
    classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dims: usize,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if dims == 0 || features.len() != dims * labels.len() {
            return Err(Error::Shape(format!(
                "{} features cannot form {} rows of width {dims}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            dims,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            dims: self.dims,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: self.provenance,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            self.dims,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.dims, self.labels.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Train / validation / test partition, with the source row indices of each part.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub indices: [Vec<usize>; 3],
}

impl Splits {
    /// Standardizes all three parts with statistics of the training part.
    pub fn standardized(&self) -> Splits {
        let s = Standardizer::fit(&self.train);
        Splits {
            train: s.apply(&self.train),
            validation: s.apply(&self.validation),
            test: s.apply(&self.test),
            indices: self.indices.clone(),
        }
    }
}

/// Gaussian blobs: class `c` is centred at angle `phase + 2*pi*c/classes` on a
/// radius-1 ring spanned by a seeded orthonormal pair of directions, with
/// isotropic noise of standard deviation `spread`.
pub fn generate_synthetic(classes: usize, per_class: usize, dims: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let mut r = rng::rng_for(seed, &[stream::DATA]);
    let plane = random_plane(dims, &mut r);
    let phase = r.random::<f64>() * std::f64::consts::TAU;
    blobs_on_ring(classes, per_class, spread, &plane, phase, &mut r)
}

/// Source and target tasks for the transfer setting: both live on the same
/// seeded ring, the target uses fewer classes placed at a rotated phase.
pub fn blob_transfer_pair(
    source_classes: usize,
    target_classes: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut r = rng::rng_for(seed, &[stream::DATA]);
    let plane = random_plane(dims, &mut r);
    let phase = r.random::<f64>() * std::f64::consts::TAU;
    let source = blobs_on_ring(source_classes, per_class, spread, &plane, phase, &mut r)?;
    let shift = std::f64::consts::PI / source_classes.max(1) as f64 / 2.0;
    let target = blobs_on_ring(target_classes, per_class, spread, &plane, phase + shift, &mut r)?;
    Ok((source, target))
}

fn random_plane(dims: usize, r: &mut rng::Rng) -> [Vec<f64>; 2] {
    if dims < 2 {
        return [vec![1.0; dims], vec![0.0; dims]];
    }
    // Gram-Schmidt on two Gaussian vectors
    let mut u: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(r)).collect();
    let mut v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(r)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nu = norm(&u);
    u.iter_mut().for_each(|a| *a /= nu);
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(b, a)| *b -= dot * a);
    let nv = norm(&v);
    v.iter_mut().for_each(|b| *b /= nv);
    [u, v]
}

fn blobs_on_ring(
    classes: usize,
    per_class: usize,
    spread: f64,
    plane: &[Vec<f64>; 2],
    phase: f64,
    r: &mut rng::Rng,
) -> Result<Dataset> {
    let dims = plane[0].len();
    if classes < 2 || per_class < 1 || dims < 2 {
        return Err(Error::Argument(format!(
            "need classes >= 2, per_class >= 1, dims >= 2; got {classes}, {per_class}, {dims}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Argument(format!("spread must be finite and >= 0, got {spread}")));
    }
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let mut features = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = phase + std::f64::consts::TAU * c as f64 / classes as f64;
        let (cos, sin) = (angle.cos(), angle.sin());
        let centre: Vec<f64> = (0..dims).map(|j| cos * plane[0][j] + sin * plane[1][j]).collect();
        for _ in 0..per_class {
            features.extend(centre.iter().map(|&m| m + noise.sample(r)));
            labels.push(c);
        }
    }
    Dataset::new(features, dims, labels, classes, Provenance::Synthetic)
}

/// Stratified split: each class is shuffled with its own seeded stream and
/// sliced contiguously by `ratios` (train, validation, test).
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| r.is_nan() || *r < 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 4 {
            return Err(Error::Argument(format!(
                "class {class} has {} rows; stratified splitting needs at least 4",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::rng_for(seed, &[stream::SPLIT, class as u64]));
        let n = idx.len() as f64;
        let n_train = (rt * n).round() as usize;
        let n_val = ((rv * n).round() as usize).min(idx.len() - n_train);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    Ok(Splits {
        train: ds.subset(&parts[0]),
        validation: ds.subset(&parts[1]),
        test: ds.subset(&parts[2]),
        indices: parts,
    })
}

/// Loads a headed CSV file. Every column except `label_column` is a numeric
/// feature; the label column holds non-negative integers. Features are
/// returned raw; see [`Standardizer`].
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path.display().to_string(), format!("{other:?}")),
        })?;
    let loc = |row: usize, col: &str| format!("{}: row {row}, column {col:?}", path.display());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no data rows"));
    }
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| {
        Error::parse(
            path.display().to_string(),
            format!(
                "unknown label column {label_column:?}; columns are {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        )
    })?;
    let dims = headers.len() - 1;
    if dims == 0 {
        return Err(Error::parse(path.display().to_string(), "no feature columns"));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::parse(format!("{}: row {row}", path.display()), e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(Error::parse(
                format!("{}: row {row}", path.display()),
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            let name = &headers[j];
            if j == label_idx {
                let label: usize = cell.parse().map_err(|_| {
                    Error::parse(loc(row, name), format!("label {cell:?} is not a non-negative integer"))
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::parse(loc(row, name), format!("{cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(Error::parse(loc(row, name), format!("{cell:?} is not finite")));
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no data rows"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, dims, labels, classes, Provenance::Csv)
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.len().max(1) as f64;
        let mut mean = vec![0.0; ds.dims];
        for i in 0..ds.len() {
            for (m, v) in mean.iter_mut().zip(ds.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; ds.dims];
        for i in 0..ds.len() {
            for ((s, v), m) in var.iter_mut().zip(ds.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // constant columns are centred but not scaled
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let features = ds
            .features
            .chunks(ds.dims)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s))
            .collect();
        Dataset { features, ..ds.clone() }
    }
}

/// Trains `specs` (whose output matches `source.classes()`) on `source`, then
/// swaps the output layer for a freshly initialized dense layer with
/// `target_classes` outputs. All other layers keep their trained weights.
pub fn pretrain(
    specs: Vec<LayerSpec>,
    source: &Dataset,
    target_classes: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<MaskedNetwork> {
    let last = specs
        .last()
        .copied()
        .ok_or_else(|| Error::Shape("network needs at least one layer".into()))?;
    if last.output_len() != source.classes() {
        return Err(Error::Argument(format!(
            "network has {} outputs but the source task has {} classes",
            last.output_len(),
            source.classes()
        )));
    }
    if target_classes < 2 {
        return Err(Error::Argument(format!(
            "target needs >= 2 classes, got {target_classes}"
        )));
    }
    let mut net = MaskedNetwork::init(specs, seed)?;
    let mut shuffle = rng::rng_for(seed, &[stream::PRETRAIN]);
    for _ in 0..epochs {
        train::sgd_epoch(&mut net, source, lr, batch_size, &mut shuffle)?;
    }
    let head = LayerSpec {
        kind: LayerKind::Dense {
            in_dim: last.input_len(),
            out_dim: target_classes,
        },
        activation: last.activation,
    };
    let index = net.specs().len() - 1;
    net.replace_layer(index, head, rng::derive(seed, &[stream::RETARGET]))?;
    Ok(net)
}
