//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to tracked inputs; calling
//! [`Graph::backward`] on a scalar node sweeps the tape once in reverse.
//! Precision is a type parameter: the finite-difference harness runs at
//! `f64`, training defaults to `f32`.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Mode, Var, COSINE_EPS, LAYER_NORM_EPS};
pub use tensor::{DType, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} is empty")]
    EmptyAxis { op: &'static str, axis: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: every position is masked")]
    AllMasked { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on an untracked value")]
    UntrackedLoss,
    #[error("backward already ran on this graph; call reset first")]
    BackwardTwice,
    #[error("function is not finite at coordinate {coord}")]
    NonFinite { coord: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
