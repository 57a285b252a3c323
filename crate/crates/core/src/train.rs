use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::MaskedNetwork;
use crate::rng::Rng;

/// One pass of mini-batch SGD over `data` in an order shuffled by `rng`.
/// Returns the mean pre-step batch loss.
pub fn sgd_epoch(net: &mut MaskedNetwork, data: &Dataset, lr: f64, batch_size: usize, rng: &mut Rng) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        total += net.sgd_step(&data.batch(chunk)?, lr)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}
