//! Multi-layer contrastive supervision for bimodal emotion recognition:
//! a small reverse-mode autodiff engine, the layers and losses built on
//! it, AdamW, a shard data format, metrics and the training harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{CrabError, Result};
pub use losses::{ClassWeights, ContrastiveConfig, ContrastiveVariant, LossBreakdown, LossConfig, Objective};
pub use optim::{AdamW, OptimConfig};
pub use model::{Batch, CrabOutput, CrabParams, ModalityMode, ModelConfig};
pub use tensor::{Real, Tape, Tensor, Var};
