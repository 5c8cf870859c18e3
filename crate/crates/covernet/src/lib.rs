//! From-scratch convolutional network stack for book-cover genre
//! classification: tensor kernels with analytic gradients, SGD/Adam
//! optimizers, two reference architectures, a balanced-split dataset
//! pipeline, evaluation reports, and a 2-D projection of class scores.
//!
//! Every stochastic step (weight init, shuffling, dropout, subsampling)
//! draws from a counter-based stream keyed on `(seed, domain, indices)`,
//! so any run can be reproduced or resumed bit-exactly from a checkpoint
//! without serializing generator internals.

pub mod batch;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod net;
pub mod optim;
pub mod parallel;
pub mod projection;
pub mod rng;
pub mod tensor;

pub use tensor::{Real, Tensor, TensorError};
