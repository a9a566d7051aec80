//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Only the operations the transformer and the training objectives need are
//! provided. Graphs are generic over [`Scalar`] so the same ops run in `f32`
//! for training and in `f64` for finite-difference checks.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig, LinearWarmup};
pub use tensor::{Scalar, Tensor};

pub(crate) use graph::log_softmax_in_place;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
}
