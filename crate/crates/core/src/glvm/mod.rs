//! The Global-local Vision Mamba network: configuration, weight layout,
//! and the dual-branch forward pass with its interaction units.

pub mod config;
pub mod forward;
pub mod weights;

pub use config::{block_dims, final_channels, stage_of, stage_out, GlvmConfig, Mode};
pub use forward::{
    convmamba_block, fiu1, fiu2, fused_scores, glvm_forward, glvm_loss, glvm_predict, patch_embed,
    stem, BnUpdates, Logits, Phase, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use weights::{param_count, weight_descs, GlvmWeights, Init, WeightDesc};
