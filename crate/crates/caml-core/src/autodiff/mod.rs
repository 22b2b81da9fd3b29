//! Reverse-mode automatic differentiation on dense f32 tensors.
//!
//! The graph is dynamic: every differentiable op appends a node to a
//! [`Tape`], and [`Tape::backward`] replays the nodes in reverse, folding
//! pass-local adjoints into each leaf's persistent `grad` buffer.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_fn};
pub use sgd::{sgd_step, Sgd, SgdConfig};
pub use tape::{OpAttrs, Tape};
pub use tensor::Tensor;
