//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every operation records a backward closure on its output; calling
//! [`Tensor::backward`] on a scalar loss walks the graph in reverse
//! topological order and accumulates gradients into each tensor that
//! requires them. The op set is exactly what the networks and losses here
//! need: affine maps, ReLU, softmax, cross-entropy, gradient reversal,
//! batch normalization, dropout, and a handful of elementwise/structural
//! helpers.
//!
//! A graph and its tensors are confined to one thread; independent graphs
//! may run concurrently. There is no global mutable state beyond a
//! per-thread flag that disables recording inside [`with_no_grad`].

mod batchnorm;
pub mod gradcheck;
mod ops;
mod tensor;

pub use batchnorm::BatchNormState;
pub use ops::{
    abs, add, add_n, batch_norm, binary_cross_entropy, concat_cols, cross_entropy, dropout, exp,
    gradient_reversal, linear, mean, mul, pairwise_sq_dists, relu, scale, select_rows, sigmoid,
    softmax, sub, sum,
};
pub use tensor::{with_no_grad, Tensor};

use thiserror::Error;

/// Train/eval switch for mode-dependent operations (batch norm, dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Errors surfaced by tensor operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a {expected} tensor, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("class index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: needs a batch of at least {min} rows in train mode, got {got}")]
    BatchTooSmall {
        op: &'static str,
        min: usize,
        got: usize,
    },
    #[error("{op}: invalid parameter {name}={value}: must satisfy {constraint}")]
    InvalidParameter {
        op: &'static str,
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("backward: expected a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
}
