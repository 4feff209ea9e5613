//! Dense tensors, a reverse-mode tape, the layer set CNN14 needs, and SGD.

mod conv;
mod element;
mod gradcheck;
mod graph;
mod norm;
mod optim;
mod pool;
mod tensor;

use thiserror::Error;

pub use element::Element;
pub use gradcheck::{grad_check, relative_error, Coordinates, GradCheckReport};
pub use graph::{pool_output_extent, Gradients, Graph, Mode, Var};
pub use norm::{BatchStats, BN_EPS, BN_MOMENTUM};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("pool input {height}x{width} is smaller than the 2x2 kernel")]
    InputTooSmall { height: usize, width: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
