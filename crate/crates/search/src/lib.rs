//! Architecture search: a weight-entangled supernet over the full space,
//! per-stage supernet training and subnet evaluation, evolutionary search,
//! and the alternating global/local controller.

pub mod alternate;
pub mod evolve;
pub mod supernet;
pub mod trainer;

pub use alternate::{glanas, write_history_csv, GlanasOptions, GlanasResult, SearchEnv, SupernetEnv};
pub use evolve::{evolve_stage, EvolveOptions, Fitness, GenRecord, StageCtx};
pub use supernet::{buildable_locals, default_local, to_glvm, Supernet};
pub use trainer::{
    evaluate_subnet, fit_fixed_locals, sample_stage_config, train_step, train_supernet,
    SupernetTrainOptions,
};

use glvm_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search space: {0}")]
    Space(String),
    #[error("entanglement: {0}")]
    Entangle(String),
    #[error("non-finite loss at supernet step {step} on config {config}")]
    NonFinite { step: u64, config: String },
    #[error("empty validation set")]
    EmptyVal,
    #[error("harness: {0}")]
    Harness(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] TensorError),
}
