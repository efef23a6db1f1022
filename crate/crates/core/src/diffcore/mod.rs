//! Dense reverse-mode differentiation for small networks.
//!
//! The engine supports differentiating through gradients: a backward pass
//! records its own operations, so a loss built from first or second input
//! derivatives of a network still has exact parameter gradients.

mod activation;
mod graph;
mod tape;
mod tensor;

pub use activation::Activation;
pub use graph::{
    grad_input, grad_params, network_forward, second_input_derivative, value_forward, NetGraph,
    NetTape, ParamGrads, ParamVars,
};
pub use tape::{Tape, Var};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },

    #[error("variable {0} is not recorded on this tape")]
    UnknownVar(usize),

    #[error("index {index} out of range for width {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{op} of an empty tensor")]
    Empty { op: &'static str },

    #[error("activation {0} is not twice differentiable")]
    UnsupportedActivation(&'static str),
}
