//! Max pooling over `batch x height x width x channels`.
//!
//! Output dimension per axis is `floor((size - k) / stride) + 1`; trailing
//! pixels that do not fill a window are dropped. The gradient routes each
//! upstream value to the first maximal position in row-major window scan
//! order, which pins tie behavior and keeps the backward pass
//! deterministic.

use crate::tensor::{Real, Tensor};

use super::LayerError;

const OP: &str = "maxpool2d";

fn geometry(
    shape: &[usize],
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> Result<(usize, usize, usize, usize, usize, usize), LayerError> {
    if shape.len() != 4 {
        return Err(LayerError::RankMismatch {
            op: OP,
            expected: 4,
            actual: shape.len(),
        });
    }
    if kh == 0 || kw == 0 {
        return Err(LayerError::InvalidParam {
            op: OP,
            name: "kernel",
            reason: "must be at least 1".into(),
        });
    }
    if sh == 0 || sw == 0 {
        return Err(LayerError::InvalidParam {
            op: OP,
            name: "stride",
            reason: "must be at least 1".into(),
        });
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if h < kh {
        return Err(LayerError::WindowTooLarge {
            op: OP,
            axis: "height",
            size: h,
            window: "pool",
            k: kh,
        });
    }
    if w < kw {
        return Err(LayerError::WindowTooLarge {
            op: OP,
            axis: "width",
            size: w,
            window: "pool",
            k: kw,
        });
    }
    Ok((b, h, w, c, (h - kh) / sh + 1, (w - kw) / sw + 1))
}

pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>, LayerError> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (b, _h, _w, c, oh, ow) = geometry(input.shape(), kh, kw, sh, sw)?;
    let data = input.data();
    let mut out = Tensor::zeros(&[b, oh, ow, c])?;
    let out_data = out.data_mut();
    let mut o = 0;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    for ky in 0..kh {
                        let iy = oy * sh + ky;
                        let row = input.offset4(bi, iy, ox * sw, ch);
                        for kx in 0..kw {
                            let v = data[row + kx * c];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out_data[o] = best;
                    o += 1;
                }
            }
        }
    }
    debug_assert!(out.all_finite(), "maxpool2d produced a non-finite value");
    Ok(out)
}

pub fn maxpool2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (b, _h, _w, c, oh, ow) = geometry(input.shape(), kh, kw, sh, sw)?;
    let expected = [b, oh, ow, c];
    if grad_out.shape() != expected {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "gradient elements",
            expected: expected.iter().product(),
            actual: grad_out.len(),
        });
    }
    let data = input.data();
    let go = grad_out.data();
    let mut dinput = Tensor::zeros(input.shape())?;
    let din = dinput.data_mut();
    let mut o = 0;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    // Re-derive the argmax; `>` keeps the first maximum in
                    // (ky, kx) scan order on ties.
                    let mut best = T::neg_infinity();
                    let mut best_off = 0usize;
                    for ky in 0..kh {
                        let iy = oy * sh + ky;
                        let row = input.offset4(bi, iy, ox * sw, ch);
                        for kx in 0..kw {
                            let off = row + kx * c;
                            let v = data[off];
                            if v > best {
                                best = v;
                                best_off = off;
                            }
                        }
                    }
                    din[best_off] += go[o];
                    o += 1;
                }
            }
        }
    }
    Ok(dinput)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_stride_one_on_a_ramp() {
        // 3x3 input 1..=9, 2x2 window, stride 1: maxima are the
        // bottom-right corner of each window.
        let input = Tensor::from_fn(&[1, 3, 3, 1], |i| (i + 1) as f64).unwrap();
        let out = maxpool2d(&input, (2, 2), (1, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 1]);
        assert_eq!(out.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn trailing_pixels_are_dropped() {
        // (7 - 2) / 2 + 1 = 3 per axis.
        let input = Tensor::from_fn(&[1, 7, 7, 1], |i| i as f32).unwrap();
        let out = maxpool2d(&input, (2, 2), (2, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 1]);
    }

    #[test]
    fn overlapping_three_by_three_stride_two() {
        let input = Tensor::from_fn(&[1, 55, 55, 2], |i| (i % 97) as f32).unwrap();
        let out = maxpool2d(&input, (3, 3), (2, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 27, 27, 2]);
    }

    #[test]
    fn channels_pool_independently() {
        let mut input = Tensor::<f64>::zeros(&[1, 2, 2, 2]).unwrap();
        // Channel 0 peaks at (0,0); channel 1 peaks at (1,1).
        input.data_mut()[0] = 5.0;
        input.data_mut()[7] = 9.0;
        let out = maxpool2d(&input, (2, 2), (2, 2)).unwrap();
        assert_eq!(out.data(), &[5.0, 9.0]);
    }

    #[test]
    fn gradient_goes_to_first_maximum_on_ties() {
        // All-equal window: the whole upstream gradient lands on the
        // top-left element.
        let input = Tensor::filled(&[1, 2, 2, 1], 3.0).unwrap();
        let go = Tensor::new(&[1, 1, 1, 1], vec![2.5f64]).unwrap();
        let din = maxpool2d_backward(&input, (2, 2), (2, 2), &go).unwrap();
        assert_eq!(din.data(), &[2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_over_overlapping_windows() {
        // 3x1 input [0,2,1], window 2x1, stride 1: both windows pick the
        // middle element, so its gradient is the sum of both upstream
        // values.
        let input = Tensor::new(&[1, 3, 1, 1], vec![0.0f64, 2.0, 1.0]).unwrap();
        let go = Tensor::new(&[1, 2, 1, 1], vec![1.0f64, 10.0]).unwrap();
        let din = maxpool2d_backward(&input, (2, 1), (1, 1), &go).unwrap();
        assert_eq!(din.data(), &[0.0, 11.0, 0.0]);
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let input = Tensor::<f32>::zeros(&[1, 2, 2, 1]).unwrap();
        assert!(matches!(
            maxpool2d(&input, (3, 3), (1, 1)).unwrap_err(),
            LayerError::WindowTooLarge { axis: "height", .. }
        ));
    }
}
