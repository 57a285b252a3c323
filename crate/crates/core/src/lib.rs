//! Joint fine-tuning and pruning of small feed-forward networks.
//!
//! The crate alternates three steps on a pre-trained network: fine-tune on the
//! target data, let an expected-improvement Bayesian optimizer pick new
//! layer-wise pruning parameters, and apply them with a prune/splice mask
//! update. See [`finepruner::run_fineprune`] for the outer loop.

pub mod bo;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod finepruner;
pub mod gp;
pub mod nnet;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod surgery;
pub mod train;

pub use error::{Error, Result};
