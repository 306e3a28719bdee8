//! JumpReLU sparse autoencoders trained with straight-through threshold
//! gradients, plus the evaluation tooling that goes with them: unsupervised
//! reconstruction metrics, linear "dark matter" probes of the residual, and
//! Hungarian feature matching between dictionaries.
//!
//! All arithmetic runs in `f64`; the on-disk formats ([`data::shard`],
//! [`modelfile`]) store little-endian `f32`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod darkmatter;
pub mod data;
pub mod error;
pub mod featmatch;
pub mod grad;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod modelfile;
pub mod numerics;
pub mod optim;
pub mod rng;

pub use data::ActivationBatch;
pub use error::{Result, SaeError};
pub use grad::Gradients;
pub use kernel::Kernel;
pub use model::{LossBreakdown, SaeParams};
pub use optim::{AdamState, TrainConfig};
