//! Dense tensors with tape-based reverse-mode differentiation, plus the
//! optimizer and checkpoint container used for training.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, clip_global_norm, step_lr, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{grad_check, grad_check_probe, relative_error, GradCheckReport, Probe, REL_ERROR_FLOOR};
pub use params::{ParamId, ParamStore};
pub use tape::{bce_logit, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
