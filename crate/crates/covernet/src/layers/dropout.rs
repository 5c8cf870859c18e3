//! Inverted dropout.
//!
//! Surviving units are scaled by `1/keep_prob` at train time so inference
//! is a plain identity. The mask is a function of the generator handed in
//! by the caller; rebuilding the generator from the same key reproduces
//! the mask exactly, and the backward pass reuses the forward mask rather
//! than redrawing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

use super::{LayerError, PassMode};

const OP: &str = "dropout";

/// Per-element scale factors: `0` for dropped units, `1/keep_prob` for
/// survivors (all `1` in inference mode).
#[derive(Debug, Clone)]
pub struct DropoutMask<T = f32>(pub Tensor<T>);

pub fn dropout<T: Real>(
    input: &Tensor<T>,
    keep_prob: f64,
    mode: PassMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, DropoutMask<T>), LayerError> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(LayerError::InvalidParam {
            op: OP,
            name: "keep_prob",
            reason: format!("{keep_prob} is outside (0, 1]"),
        });
    }
    let mask = match mode {
        PassMode::Infer => Tensor::filled(input.shape(), T::one())?,
        PassMode::Train => {
            let inv = T::of_f64(1.0 / keep_prob);
            Tensor::from_fn(input.shape(), |_| {
                if rng.random::<f64>() < keep_prob {
                    inv
                } else {
                    T::zero()
                }
            })?
        }
    };
    let mut out = input.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o *= m;
    }
    Ok((out, DropoutMask(mask)))
}

pub fn dropout_backward<T: Real>(
    grad_out: &Tensor<T>,
    mask: &DropoutMask<T>,
) -> Result<Tensor<T>, LayerError> {
    if grad_out.shape() != mask.0.shape() {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "gradient elements",
            expected: mask.0.len(),
            actual: grad_out.len(),
        });
    }
    let mut out = grad_out.clone();
    for (g, &m) in out.data_mut().iter_mut().zip(mask.0.data()) {
        *g *= m;
    }
    Ok(out)
}
