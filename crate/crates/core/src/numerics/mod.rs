//! Reverse-mode automatic differentiation over dense f64 matrices, plus
//! the Adam optimizer. Every trainable model in the crate is built on
//! this module.
//!
//! Graphs are define-by-run and rebuilt per forward pass; values are
//! plain owned buffers, so finished tensors can move freely between the
//! threads running independent jobs.

mod adam;
pub mod gradcheck;
mod graph;
pub mod linalg;
mod params;
mod tensor;

pub use adam::AdamState;
pub use graph::{Gradients, Graph, NodeId, LOG_FLOOR};
pub use params::{randn_tensor, BoundParams, ParamSet};
pub use tensor::Tensor;
