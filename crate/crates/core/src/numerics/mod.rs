//! Dense f32 tensors, tape-based reverse-mode autodiff and Adam.

mod adam;
mod graph;
pub mod kernels;
pub mod ops;
mod tensor;

pub use adam::AdamState;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
