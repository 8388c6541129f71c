//! Core of the global-local vision Mamba stack: a dense tensor library with
//! reverse-mode autodiff, the selective state-space kernels, the multi-head
//! multi-direction Mamba block, the full dual-branch network, and the
//! architecture search space it is searched over.

pub mod checkpoint;
pub mod elem;
pub mod error;
pub mod glvm;
pub mod mhmamba;
pub mod ops;
pub mod space;
pub mod ssm;
pub mod tensor;

pub use elem::{Dtype, Elem};
pub use error::{Result, TensorError};
pub use tensor::{Graph, Tensor};
