//! Orthogonal dropout ensembles.
//!
//! A single small network is split into `k` subnetworks whose weight masks
//! never overlap. Subnetworks are trained one after another: pretrain on the
//! weights nobody has claimed yet, pick a mask with edge-pop score search,
//! then finetune only the kept weights. At inference the subnetworks'
//! predictive distributions are averaged.
//!
//! Modules:
//! - [`nn`]: dense / conv / batchnorm engine with manual backprop and SGD.
//! - [`masks`]: mask algebra, orthogonal partitions, constraint checks.
//! - [`edgepop`]: score-based mask optimization with straight-through gradients.
//! - [`trainer`]: the sequential training loop and the MC dropout and deep
//!   ensemble baselines.
//! - [`eval`]: ensemble aggregation, accuracy, NLL, ECE, inter-rater agreement.
//! - [`data`], [`checkpoint`], [`config`], [`cli`]: datasets, persistence,
//!   configuration, and the command-line surface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod edgepop;
mod error;
pub mod eval;
pub mod masks;
pub mod nn;
pub mod seed;
mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
