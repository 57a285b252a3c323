//! Feed-forward network engine with per-connection binary masks.
//!
//! Every layer stores its weights densely next to a mask of the same shape.
//! The forward pass only ever sees the *effective* weight (the stored weight
//! where the mask is set, exactly zero elsewhere). Training updates every
//! stored weight, masked or not, with the gradient its position would receive
//! if it were active, so a pruned connection keeps drifting and can later be
//! spliced back in by [`crate::surgery::update_masks`].

mod checkpoint;
mod layer;

pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file};
pub use layer::{Activation, LayerKind, LayerSpec};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// A mini-batch: row-major inputs (`len × features`) and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    features: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, features: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("batch must contain at least one sample".into()));
        }
        if features == 0 || inputs.len() != features * labels.len() {
            return Err(Error::Shape(format!(
                "batch of {} labels needs {} inputs of width {features}, got {}",
                labels.len(),
                features * labels.len(),
                inputs.len()
            )));
        }
        Ok(Self {
            inputs,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }
}

/// Weights, bias and mask of one layer. The bias is never masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mask: Vec<bool>,
}

impl MaskedLayer {
    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn pruned_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    pub fn remaining_count(&self) -> usize {
        self.weights.len() - self.pruned_count()
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.mask)
            .map(|(&w, &m)| if m { w } else { 0.0 })
            .collect()
    }
}

/// Per-layer gradients with respect to the effective weight positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Value copy of a network's trainable state, used to roll candidate
/// evaluations back and as the checkpoint payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub layers: Vec<LayerState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub kind_tag: u32,
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNetwork {
    specs: Vec<LayerSpec>,
    layers: Vec<MaskedLayer>,
    seed: u64,
}

impl MaskedNetwork {
    /// Builds a network with He-scaled Gaussian weights (std = sqrt(2 / fan_in)),
    /// zero biases and all-ones masks. Layer `k` draws from its own stream of
    /// `seed`, so changing one layer's shape leaves the others' weights alone.
    pub fn init(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_specs(&specs)?;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(k, spec)| init_layer(spec, seed, k as u64))
            .collect();
        Ok(Self { specs, layers, seed })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[MaskedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MaskedLayer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_len(&self) -> usize {
        self.specs[0].input_len()
    }

    pub fn classes(&self) -> usize {
        self.specs[self.specs.len() - 1].output_len()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(MaskedLayer::weight_count).sum()
    }

    pub fn total_biases(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.total_weights() + self.total_biases()
    }

    pub fn remaining_weights(&self) -> usize {
        self.layers.iter().map(MaskedLayer::remaining_count).sum()
    }

    /// Remaining weights plus all biases.
    pub fn remaining_parameters(&self) -> usize {
        self.remaining_weights() + self.total_biases()
    }

    /// Replaces layer `index` with a freshly initialized layer of `spec`.
    /// Used to swap the classifier head when retargeting a network.
    pub fn replace_layer(&mut self, index: usize, spec: LayerSpec, seed: u64) -> Result<()> {
        if index >= self.specs.len() {
            return Err(Error::Argument(format!(
                "layer index {index} out of range for {} layers",
                self.specs.len()
            )));
        }
        let mut specs = self.specs.clone();
        specs[index] = spec;
        validate_specs(&specs)?;
        self.layers[index] = init_layer(&specs[index], seed, index as u64);
        self.specs = specs;
        Ok(())
    }

    pub fn forward(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch, false)?;
        let mut acts = batch.inputs.clone();
        for (spec, layer) in self.specs.iter().zip(&self.layers) {
            let eff = layer.effective_weights();
            let mut z = spec.kind.forward(&eff, &layer.bias, &acts, batch.len());
            spec.activation.apply(&mut z);
            acts = z;
        }
        Ok(acts)
    }

    /// Mean cross-entropy of the batch under the current effective weights.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch, true)?;
        let logits = self.forward(batch)?;
        let (loss, _) = cross_entropy(&logits, batch.labels(), self.classes());
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: self.specs.len() - 1,
                detail: format!("loss is {loss}"),
            });
        }
        Ok(loss)
    }

    /// Loss and gradients with respect to each effective weight position.
    ///
    /// The gradient of a masked position is the value it would have if the
    /// connection were active (the chain rule through `w * m` evaluated with
    /// `m = 1` for the weight factor); for unmasked positions this is the
    /// ordinary gradient.
    pub fn gradients(&self, batch: &Batch) -> Result<(f64, Vec<LayerGrads>)> {
        self.check_batch(batch, true)?;
        let n = batch.len();
        let effective: Vec<Vec<f64>> = self.layers.iter().map(MaskedLayer::effective_weights).collect();

        // layer_inputs[k] is the input to layer k; pre[k] the pre-activation output.
        let mut layer_inputs: Vec<Vec<f64>> = Vec::with_capacity(self.specs.len());
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.specs.len());
        let mut acts = batch.inputs.clone();
        for (k, (spec, layer)) in self.specs.iter().zip(&self.layers).enumerate() {
            let z = spec.kind.forward(&effective[k], &layer.bias, &acts, n);
            let mut a = z.clone();
            spec.activation.apply(&mut a);
            if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: k,
                    detail: format!("activation is {bad}"),
                });
            }
            layer_inputs.push(std::mem::replace(&mut acts, a));
            pre.push(z);
        }

        let last = self.specs.len() - 1;
        let (loss, mut delta) = cross_entropy(&acts, batch.labels(), self.classes());
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: last,
                detail: format!("loss is {loss}"),
            });
        }
        // Softmax/identity heads pass the cross-entropy gradient straight through.
        if self.specs[last].activation == Activation::Relu {
            Activation::Relu.backprop(&pre[last], &mut delta);
        }

        let mut grads = vec![
            LayerGrads {
                weights: Vec::new(),
                bias: Vec::new(),
            };
            self.specs.len()
        ];
        for k in (0..self.specs.len()).rev() {
            let spec = &self.specs[k];
            let (gw, gb, dx) = spec.kind.backward(&effective[k], &layer_inputs[k], &delta, n, k > 0);
            grads[k] = LayerGrads { weights: gw, bias: gb };
            if k > 0 {
                delta = dx;
                self.specs[k - 1].activation.backprop(&pre[k - 1], &mut delta);
            }
        }
        Ok((loss, grads))
    }

    /// One SGD step on `batch`. Every stored weight moves, including masked
    /// ones; masks are left untouched. Returns the pre-step loss.
    pub fn sgd_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        let (loss, grads) = self.gradients(batch)?;
        for (layer, g) in self.layers.iter_mut().zip(&grads) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(loss)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits.chunks(self.classes()).map(argmax).collect())
    }

    pub fn snapshot(&self) -> NetworkState {
        NetworkState {
            layers: self
                .specs
                .iter()
                .zip(&self.layers)
                .map(|(spec, layer)| LayerState {
                    kind_tag: spec.kind.tag(),
                    shape: spec.kind.weight_shape(),
                    weights: layer.weights.clone(),
                    bias: layer.bias.clone(),
                    mask: layer.mask.clone(),
                })
                .collect(),
        }
    }

    pub fn restore(&mut self, state: &NetworkState) -> Result<()> {
        if state.layers.len() != self.specs.len() {
            return Err(Error::Shape(format!(
                "state has {} layers, network has {}",
                state.layers.len(),
                self.specs.len()
            )));
        }
        for (k, (spec, ls)) in self.specs.iter().zip(&state.layers).enumerate() {
            let shape = spec.kind.weight_shape();
            let n: usize = shape.iter().product();
            if ls.kind_tag != spec.kind.tag()
                || ls.shape != shape
                || ls.weights.len() != n
                || ls.mask.len() != n
                || ls.bias.len() != spec.kind.bias_len()
            {
                return Err(Error::Shape(format!(
                    "layer {k}: state shape {:?} (tag {}) does not match {:?} (tag {})",
                    ls.shape,
                    ls.kind_tag,
                    shape,
                    spec.kind.tag()
                )));
            }
        }
        for (layer, ls) in self.layers.iter_mut().zip(&state.layers) {
            layer.weights.clone_from(&ls.weights);
            layer.bias.clone_from(&ls.bias);
            layer.mask.clone_from(&ls.mask);
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch, labels: bool) -> Result<()> {
        if batch.features != self.input_len() {
            return Err(Error::Shape(format!(
                "network expects {} input features, batch has {}",
                self.input_len(),
                batch.features
            )));
        }
        if labels {
            let classes = self.classes();
            if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Argument(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of samples whose arg-max logit differs from the label, over a
/// stream of batches.
pub fn top1_error<'a, I>(net: &MaskedNetwork, data: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Batch>,
{
    let mut wrong = 0usize;
    let mut total = 0usize;
    for batch in data {
        let predicted = net.predict(batch)?;
        wrong += predicted.iter().zip(batch.labels()).filter(|(p, l)| p != l).count();
        total += batch.len();
    }
    if total == 0 {
        return Err(Error::Argument("cannot score an empty dataset".into()));
    }
    Ok(wrong as f64 / total as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy via log-sum-exp, and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, (row, &label)) in logits.chunks(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (c, gv) in g.iter_mut().enumerate() {
            *gv = (row[c] - lse).exp() / n;
        }
        g[label] -= 1.0 / n;
    }
    (loss / n, grad)
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Shape("network needs at least one layer".into()));
    }
    for (k, spec) in specs.iter().enumerate() {
        spec.validate().map_err(|e| Error::Shape(format!("layer {k}: {e}")))?;
        if spec.activation == Activation::Softmax && k + 1 != specs.len() {
            return Err(Error::Shape(format!(
                "layer {k}: softmax is only allowed on the output layer"
            )));
        }
    }
    for (k, pair) in specs.windows(2).enumerate() {
        let (out, inp) = (pair[0].output_len(), pair[1].input_len());
        if out != inp {
            return Err(Error::Shape(format!(
                "layer {k} produces {out} values but layer {} expects {inp}",
                k + 1
            )));
        }
    }
    Ok(())
}

fn init_layer(spec: &LayerSpec, seed: u64, index: u64) -> MaskedLayer {
    let n = spec.kind.weight_len();
    let std = (2.0 / spec.kind.fan_in() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("fan-in is positive");
    let mut rng = rng::rng_for(seed, &[stream::INIT, index]);
    MaskedLayer {
        weights: (0..n).map(|_| normal.sample(&mut rng)).collect(),
        bias: vec![0.0; spec.kind.bias_len()],
        mask: vec![true; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MaskedNetwork {
        MaskedNetwork::init(
            vec![
                LayerSpec::dense(2, 4, Activation::Relu),
                LayerSpec::dense(4, 3, Activation::Softmax),
            ],
            7,
        )
        .unwrap()
    }

    fn batch() -> Batch {
        Batch::new(vec![0.5, -1.0, 1.5, 0.25, -0.3, 0.8], 2, vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn init_counts_and_determinism() {
        let net = small();
        assert_eq!(net.total_weights(), 20);
        assert_eq!(net.total_biases(), 7);
        assert_eq!(net.remaining_weights(), 20);
        assert_eq!(net, small());
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let err = MaskedNetwork::init(
            vec![
                LayerSpec::dense(2, 4, Activation::Relu),
                LayerSpec::dense(5, 3, Activation::Identity),
            ],
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn softmax_only_on_output() {
        let err = MaskedNetwork::init(
            vec![
                LayerSpec::dense(2, 4, Activation::Softmax),
                LayerSpec::dense(4, 3, Activation::Identity),
            ],
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_masks_and_biases_give_zero_logits() {
        let mut net = small();
        for layer in net.layers_mut() {
            layer.mask.iter_mut().for_each(|m| *m = false);
        }
        let logits = net.forward(&batch()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        // all-zero logits tie; lowest class wins
        assert_eq!(net.predict(&batch()).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn hand_computed_single_layer() {
        let mut net = MaskedNetwork::init(vec![LayerSpec::dense(2, 2, Activation::Identity)], 0).unwrap();
        // row-major [out, in]: W = [[1, 2], [3, 4]]
        net.layers_mut()[0].weights = vec![1.0, 2.0, 3.0, 4.0];
        net.layers_mut()[0].bias = vec![0.5, -0.5];
        let b = Batch::new(vec![1.0, 0.0], 2, vec![0]).unwrap();
        // input [1, 0] picks the first input column: (1, 3) + bias
        assert_eq!(net.forward(&b).unwrap(), vec![1.5, 2.5]);
    }

    #[test]
    fn masked_weight_is_inert_but_trains() {
        let mut net = small();
        net.layers_mut()[0].mask[3] = false;
        let before = net.forward(&batch()).unwrap();
        let mut perturbed = net.clone();
        perturbed.layers_mut()[0].weights[3] += 123.0;
        assert_eq!(perturbed.forward(&batch()).unwrap(), before);

        let w = net.layers()[0].weights[3];
        let (_, grads) = net.gradients(&batch()).unwrap();
        assert!(grads[0].weights[3] != 0.0);
        net.sgd_step(&batch(), 0.1).unwrap();
        assert_ne!(net.layers()[0].weights[3], w);
        assert!(!net.layers()[0].mask[3]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut net = small();
        let original = net.clone();
        let loss = net.sgd_step(&batch(), 0.0).unwrap();
        assert_eq!(net, original);
        assert_eq!(loss, original.loss(&batch()).unwrap());
        assert!(net.sgd_step(&batch(), -1.0).is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut net = small();
        net.layers_mut()[1].weights[0] = f64::INFINITY;
        net.layers_mut()[0].weights.iter_mut().for_each(|w| *w = 1.0);
        let b = Batch::new(vec![1.0, 1.0], 2, vec![0]).unwrap();
        match net.sgd_step(&b, 0.1) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn top1_counts() {
        let mut net = MaskedNetwork::init(vec![LayerSpec::dense(2, 2, Activation::Identity)], 0).unwrap();
        net.layers_mut()[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        let right = Batch::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1]).unwrap();
        let wrong = Batch::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![1, 0]).unwrap();
        let mixed = Batch::new(vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 3.0], 2, vec![0, 1, 0, 0]).unwrap();
        assert_eq!(top1_error(&net, [&right]).unwrap(), 0.0);
        assert_eq!(top1_error(&net, [&wrong]).unwrap(), 1.0);
        assert_eq!(top1_error(&net, [&mixed]).unwrap(), 0.25);
        assert!(top1_error(&net, std::iter::empty::<&Batch>()).is_err());
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut net = small();
        let state = net.snapshot();
        let original = net.clone();
        net.sgd_step(&batch(), 0.5).unwrap();
        net.layers_mut()[1].mask[0] = false;
        assert_ne!(net, original);
        // the snapshot is a deep copy
        assert_eq!(state, original.snapshot());
        net.restore(&state).unwrap();
        assert_eq!(net, original);

        let mut other = MaskedNetwork::init(vec![LayerSpec::dense(2, 3, Activation::Identity)], 1).unwrap();
        assert!(matches!(other.restore(&state), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_then_dense_composes() {
        let conv = LayerSpec::conv2d(1, 2, 2, 1, (3, 3), Activation::Relu);
        assert_eq!(conv.output_len(), 2 * 2 * 2);
        let net = MaskedNetwork::init(vec![conv, LayerSpec::dense(8, 2, Activation::Softmax)], 3).unwrap();
        let b = Batch::new((0..9).map(|v| v as f64 / 9.0).collect(), 9, vec![1]).unwrap();
        assert_eq!(net.forward(&b).unwrap().len(), 2);
    }
}
