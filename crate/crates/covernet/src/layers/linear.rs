//! Fully-connected layer: `out = input · weights + bias`.
//!
//! Weights are `in_features x out_features`, so a weight row is the
//! fan-out of one input feature and both passes run as rank-1 updates
//! over contiguous rows.

use crate::tensor::{Real, Tensor};

use super::LayerError;

const OP: &str = "linear";

fn geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize), LayerError> {
    if input.rank() != 2 {
        return Err(LayerError::RankMismatch {
            op: OP,
            expected: 2,
            actual: input.rank(),
        });
    }
    if weights.rank() != 2 {
        return Err(LayerError::RankMismatch {
            op: OP,
            expected: 2,
            actual: weights.rank(),
        });
    }
    let (batch, in_features) = (input.shape()[0], input.shape()[1]);
    let (w_in, out_features) = (weights.shape()[0], weights.shape()[1]);
    if w_in != in_features {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "inner dimension",
            expected: in_features,
            actual: w_in,
        });
    }
    if bias.rank() != 1 || bias.len() != out_features {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "bias length",
            expected: out_features,
            actual: bias.len(),
        });
    }
    Ok((batch, in_features, out_features))
}

pub fn linear<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    let (batch, in_f, out_f) = geometry(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let mut out = Tensor::zeros(&[batch, out_f])?;
    let out_data = out.data_mut();
    for b in 0..batch {
        let row = &mut out_data[b * out_f..(b + 1) * out_f];
        row.copy_from_slice(bias.data());
        let xr = &x[b * in_f..(b + 1) * in_f];
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w[i * out_f..(i + 1) * out_f];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    debug_assert!(out.all_finite(), "linear produced a non-finite value");
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>, LayerError> {
    let (batch, in_f, out_f) = geometry(input, weights, bias)?;
    if grad_out.shape() != [batch, out_f] {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "gradient elements",
            expected: batch * out_f,
            actual: grad_out.len(),
        });
    }
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();

    let mut dinput = Tensor::zeros(&[batch, in_f])?;
    let mut dweights = Tensor::zeros(&[in_f, out_f])?;
    let mut dbias = Tensor::zeros(&[out_f])?;
    let din = dinput.data_mut();
    let dw = dweights.data_mut();
    let db = dbias.data_mut();
    for b in 0..batch {
        let gr = &go[b * out_f..(b + 1) * out_f];
        let xr = &x[b * in_f..(b + 1) * in_f];
        for i in 0..in_f {
            let wr = &w[i * out_f..(i + 1) * out_f];
            // dL/dx[b,i] = sum_o g[b,o] * w[i,o]
            let mut acc = T::zero();
            for (&g, &wv) in gr.iter().zip(wr) {
                acc += g * wv;
            }
            din[b * in_f + i] = acc;
            // dL/dw[i,:] += x[b,i] * g[b,:]
            let dwr = &mut dw[i * out_f..(i + 1) * out_f];
            let xv = xr[i];
            for (d, &g) in dwr.iter_mut().zip(gr) {
                *d += xv * g;
            }
        }
        for (d, &g) in db.iter_mut().zip(gr) {
            *d += g;
        }
    }
    Ok(LinearGrads {
        input: dinput,
        weights: dweights,
        bias: dbias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_on_a_small_case() {
        // x = [[1, 2]], W = [[1, 2, 3], [4, 5, 6]], b = [10, 20, 30]
        let x = Tensor::new(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let out = linear(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[19.0, 32.0, 45.0]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let x = Tensor::new(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let out = linear(&x, &w, &b).unwrap();
        // Identity input selects weight rows.
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gradients_match_hand_computation() {
        let x = Tensor::new(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let go = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let g = linear_backward(&x, &w, &b, &go).unwrap();
        // dx = g . W^T = [1+2, 3+4]
        assert_eq!(g.input.data(), &[3.0, 7.0]);
        // dW = x^T . g
        assert_eq!(g.weights.data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.bias.data(), &[1.0, 1.0]);
    }

    #[test]
    fn inner_dimension_mismatch_is_reported() {
        let x = Tensor::<f32>::zeros(&[1, 3]).unwrap();
        let w = Tensor::<f32>::zeros(&[4, 2]).unwrap();
        let b = Tensor::<f32>::zeros(&[2]).unwrap();
        assert_eq!(
            linear(&x, &w, &b).unwrap_err(),
            LayerError::DimMismatch {
                op: "linear",
                axis: "inner dimension",
                expected: 3,
                actual: 4
            }
        );
    }
}
