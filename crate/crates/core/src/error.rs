//! Error types shared by the tensor layer and the model layers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// A dimension disagreement, naming the offending axis.
    #[error("{op}: axis {axis} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    InvalidParameter { op: &'static str, msg: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("graph was already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("{op}: expected time-invariant (LTI) parameters, got per-timestep shape {shape:?}")]
    NotTimeInvariant { op: &'static str, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

impl TensorError {
    pub fn param(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidParameter { op, msg: msg.into() }
    }
}
