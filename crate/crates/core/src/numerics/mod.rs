//! Dense tensors, the convolution/pooling kernels the descriptor network
//! needs, a reverse-mode graph over them, and the optimizer.

mod conv;
mod finite_diff;
mod graph;
pub mod ops;
mod optim;
mod tensor;

pub use conv::{conv_block_backward, conv_block_forward, ConvGeometry, ConvGrads};
pub use finite_diff::{finite_diff_coords, finite_diff_gradient, relative_error};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::PairLabel;
pub use optim::{optimizer_step, NamedParam, OptimizerConfig, OptimizerMode, OptimizerState};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite values in {what}")]
    NonFinite { what: String },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("negative input {value} to a pooling layer that requires x >= 0")]
    NegativeInput { value: f64 },
    #[error("cannot normalize a vector of norm {norm:e}")]
    ZeroNorm { norm: f64 },
    #[error("node {0} has not been evaluated; run forward first")]
    NotEvaluated(usize),
    #[error("unknown graph node {0}")]
    UnknownNode(usize),
    #[error("{0}")]
    InvalidArgument(String),
}
