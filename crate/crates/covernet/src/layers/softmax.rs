//! Row-wise softmax and mean cross-entropy loss.
//!
//! The max logit is subtracted before exponentiation, so arbitrarily
//! large logits cannot overflow. The fused loss gradient with respect to
//! the logits is `(probs - onehot) / batch`.

use crate::tensor::{Real, Tensor};

use super::LayerError;

const OP: &str = "softmax";

fn check_rows<T: Real>(logits: &Tensor<T>) -> Result<(usize, usize), LayerError> {
    if logits.rank() != 2 {
        return Err(LayerError::RankMismatch {
            op: OP,
            expected: 2,
            actual: logits.rank(),
        });
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Probabilities for each row of logits.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    check_rows(logits)?;
    let classes = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes) {
        softmax_row(row);
    }
    debug_assert!(out.all_finite(), "softmax produced a non-finite value");
    Ok(out)
}

/// Probabilities plus the mean negative log-likelihood of the labels.
pub fn softmax_xent<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Tensor<T>, T), LayerError> {
    let (batch, classes) = check_rows(logits)?;
    if labels.len() != batch {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "label count",
            expected: batch,
            actual: labels.len(),
        });
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LayerError::LabelOutOfRange {
                op: OP,
                row,
                label,
                classes,
            });
        }
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        loss -= probs.at2(row, label).ln();
    }
    loss /= T::of_f64(batch as f64);
    debug_assert!(loss.is_finite(), "softmax_xent produced a non-finite loss");
    Ok((probs, loss))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_xent_backward<T: Real>(
    probs: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>, LayerError> {
    let (batch, classes) = check_rows(probs)?;
    if labels.len() != batch {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "label count",
            expected: batch,
            actual: labels.len(),
        });
    }
    let inv_batch = T::of_f64(1.0 / batch as f64);
    let mut grad = probs.clone();
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LayerError::LabelOutOfRange {
                op: OP,
                row,
                label,
                classes,
            });
        }
        let off = grad.offset2(row, label);
        grad.data_mut()[off] -= T::one();
    }
    for g in grad.data_mut() {
        *g *= inv_batch;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one_and_order_is_preserved() {
        let logits = Tensor::new(&[2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let probs = softmax(&logits).unwrap();
        for row in probs.data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row[0] < row[1] && row[1] < row[2]);
        }
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let logits = Tensor::new(&[1, 3], vec![1e4f64, 1e4 - 5.0, -1e4]).unwrap();
        let probs = softmax(&logits).unwrap();
        assert!(probs.all_finite());
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_over_30_classes_lose_ln_30() {
        let logits = Tensor::<f64>::zeros(&[4, 30]).unwrap();
        let (probs, loss) = softmax_xent(&logits, &[0, 7, 15, 29]).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 30.0).abs() < 1e-15));
        assert!((loss - 30.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_loss_approaches_zero() {
        let logits = Tensor::new(&[1, 3], vec![50.0f64, 0.0, 0.0]).unwrap();
        let (_, loss) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12);
    }

    #[test]
    fn gradient_is_probs_minus_onehot_over_batch() {
        let logits = Tensor::new(&[2, 2], vec![0.0f64, 0.0, 1.0, -1.0]).unwrap();
        let (probs, _) = softmax_xent(&logits, &[1, 0]).unwrap();
        let grad = softmax_xent_backward(&probs, &[1, 0]).unwrap();
        let want = [
            probs.at2(0, 0) / 2.0,
            (probs.at2(0, 1) - 1.0) / 2.0,
            (probs.at2(1, 0) - 1.0) / 2.0,
            probs.at2(1, 1) / 2.0,
        ];
        for (g, w) in grad.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin()).unwrap();
        let (probs, _) = softmax_xent(&logits, &[4, 2, 0]).unwrap();
        let grad = softmax_xent_backward(&probs, &[4, 2, 0]).unwrap();
        for row in grad.data().chunks(5) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_label_is_reported_with_row() {
        let logits = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let err = softmax_xent(&logits, &[1, 3]).unwrap_err();
        assert_eq!(
            err,
            LayerError::LabelOutOfRange {
                op: "softmax",
                row: 1,
                label: 3,
                classes: 3
            }
        );
    }
}
