//! Neural-network kernels with analytic gradients.
//!
//! Every op validates shapes up front and returns a structured error
//! naming the offending axis; kernels never panic on bad dimensions.
//! Backward functions take the same inputs as the forward pass plus the
//! upstream gradient, and their output is checked against central finite
//! differences in `gradcheck`. In debug builds each kernel asserts its
//! output is free of NaN/Inf.

pub mod conv;
pub mod dropout;
pub mod linear;
pub mod lrn;
pub mod pool;
pub mod relu;
pub mod softmax;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use linear::{linear, linear_backward, LinearGrads};
pub use lrn::{lrn, lrn_backward, LrnParams};
pub use pool::{maxpool2d, maxpool2d_backward};
pub use relu::{relu, relu_backward};
pub use softmax::{softmax, softmax_xent, softmax_xent_backward};

use thiserror::Error;

use crate::tensor::TensorError;

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    Train,
    Infer,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("{op}: {axis} mismatch: expected {expected}, got {actual}")]
    DimMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank-{expected} input, got rank {actual}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {axis} of size {size} is smaller than the {window} window of {k}")]
    WindowTooLarge {
        op: &'static str,
        axis: &'static str,
        size: usize,
        window: &'static str,
        k: usize,
    },
    #[error("{op}: invalid {name}: {reason}")]
    InvalidParam {
        op: &'static str,
        name: &'static str,
        reason: String,
    },
    #[error("{op}: label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange {
        op: &'static str,
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
