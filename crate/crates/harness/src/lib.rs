//! Training and evaluation harness: synthetic vein-image data, augmentation,
//! the AdamW/cosine training loop, and the closed-set verification metrics
//! (accuracy, EER, ROC).

pub mod augment;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;

use glvm_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    BadSpec(String),
    #[error("io: {0}")]
    Io(String),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("empty score or sample list")]
    EmptyScores,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
        /// Progress up to the abort; the weights are restored to the last
        /// good checkpoint before this error is returned.
        report: Box<crate::train::TrainReport>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

/// Fused verification scores for a probe set, ready for pairing.
pub fn model_scores(
    w: &glvm_core::glvm::GlvmWeights<f32>,
    probes: &[data::Sample],
    h: usize,
    width: usize,
    batch: usize,
) -> Result<Vec<(usize, Vec<f64>)>, HarnessError> {
    let out = train::evaluate(w, probes, h, width, batch)?;
    Ok(out.labels.into_iter().zip(out.scores).collect())
}
