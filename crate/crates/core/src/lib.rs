//! Batched-gradient statistics for adaptive optimizers.
//!
//! The crate is organised bottom-up:
//!
//! - [`grad_stats`] reduces a batch of examplewise gradients into per-parameter
//!   statistics (mean, raw second moment, variance, median, ...).
//! - [`optim`] holds the Adam and Eve state machines together with the relative
//!   standard-deviation diagnostics they imply.
//! - [`models`] provides small dense models with analytic examplewise
//!   backpropagation and a layerwise streaming sweep.
//! - [`stderr_lab`] runs Monte-Carlo checks of the standard-error relations
//!   between the Adam-style and Eve-style variance estimators.
//! - [`harness`] wires everything into reproducible experiments.

pub mod error;
pub mod grad_stats;
pub mod harness;
pub mod models;
pub mod optim;
pub mod stderr_lab;

pub use error::{Error, Result};
pub use grad_stats::{BlockId, GradBatch, StatKind, StatVector};
pub use models::{Dataset, Mlp, ParamBlock, Params};
pub use optim::{DebiasedMoments, HyperParams, MomentState, StepRecord};
