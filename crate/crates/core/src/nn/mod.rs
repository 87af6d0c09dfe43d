//! Dense tensors and reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use tensor::{cst, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
