#![allow(dead_code)]

use fineprune::config::{self, RunConfig};
use fineprune::finepruner::{FinePruneConfig, Task};
use fineprune::nnet::MaskedNetwork;

/// Desk-scale task built from config text, with the default pipeline.
pub fn task_from(text: &str, seed: u64) -> (RunConfig, MaskedNetwork, Task) {
    let cfg = RunConfig::from_sources(text, &[], Some(seed), None).unwrap();
    let (net, task) = config::prepare(&cfg).unwrap();
    (cfg, net, task)
}

/// A smaller, faster variant for contract tests.
pub const QUICK: &str = "
net.hidden = [16, 16]
data.per_class = 40
bo.budget = 8
bo.n_init = 3
bo.pool_size = 256
outer.max_rounds = 3
finetune.epochs = 3
finetune.eval_epochs = 1
log.timing = false
";

pub fn quick(seed: u64) -> (FinePruneConfig, MaskedNetwork, Task) {
    let (cfg, net, task) = task_from(QUICK, seed);
    (cfg.fineprune, net, task)
}

pub fn bits(state: &fineprune::nnet::NetworkState) -> Vec<u64> {
    state
        .layers
        .iter()
        .flat_map(|l| {
            l.weights
                .iter()
                .chain(&l.bias)
                .map(|v| v.to_bits())
                .chain(l.mask.iter().map(|&m| m as u64))
        })
        .collect()
}
