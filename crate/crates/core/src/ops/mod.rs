//! Primitive tensor ops. Each op validates shapes, computes its forward
//! value, and (when the graph is recording and an input takes gradients)
//! pushes one backward closure onto the tape.

pub mod act;
pub mod arith;
pub mod conv;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod shape;

pub use loss::Target;
pub use norm::{BatchStats, BnMode};
