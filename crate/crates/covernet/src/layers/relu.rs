//! Rectified linear unit, any rank.

use crate::tensor::{Real, Tensor};

use super::LayerError;

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes upstream gradient where the forward input was strictly
/// positive; the subgradient at zero is zero.
pub fn relu_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    if input.shape() != grad_out.shape() {
        return Err(LayerError::DimMismatch {
            op: "relu",
            axis: "gradient elements",
            expected: input.len(),
            actual: grad_out.len(),
        });
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives_and_keeps_positives() {
        let input = Tensor::new(&[5], vec![-2.0f64, -0.0, 0.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&input).data(), &[0.0, 0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn gradient_masks_non_positive_inputs() {
        let input = Tensor::new(&[4], vec![-1.0f64, 0.0, 2.0, -3.0]).unwrap();
        let go = Tensor::filled(&[4], 7.0).unwrap();
        let din = relu_backward(&input, &go).unwrap();
        assert_eq!(din.data(), &[0.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let input = Tensor::<f32>::zeros(&[4]).unwrap();
        let go = Tensor::<f32>::zeros(&[5]).unwrap();
        assert!(relu_backward(&input, &go).is_err());
    }
}
