//! Grouped 2-D convolution over `batch x height x width x channels`.
//!
//! The spatial window is lowered to a patch matrix (one row per output
//! pixel, `kh*kw*in_c_per_group` columns), and both passes run as rank-1
//! updates over contiguous rows, which the compiler vectorizes without
//! reordering any floating-point reduction. Accumulation order is fixed
//! (kernel row, kernel col, channel; batch ascending), so results are
//! bit-identical for any thread count.

use crate::parallel::for_each_chunk;
use crate::tensor::{Real, Tensor};

use super::LayerError;

const OP: &str = "conv2d";

/// Filter bank plus geometry. Filters are laid out
/// `out_channels x kh x kw x in_channels_per_group`; output channel `o`
/// reads input channels `(o / (out_channels/groups)) * icpg .. + icpg`.
#[derive(Debug, Clone)]
pub struct ConvParams<T = f32> {
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

/// Resolved geometry for one forward/backward call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub icpg: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    /// Output channels per group.
    pub npg: usize,
    /// Patch-matrix rows (`out_h * out_w`).
    pub m: usize,
    /// Patch-matrix columns (`kh * kw * icpg`).
    pub k: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn out_channels(&self) -> usize {
        self.filters.shape()[0]
    }

    /// Validates filters, bias, strides, groups, and the input shape;
    /// returns the resolved geometry.
    pub(crate) fn geometry(&self, input_shape: &[usize]) -> Result<ConvGeom, LayerError> {
        if input_shape.len() != 4 {
            return Err(LayerError::RankMismatch {
                op: OP,
                expected: 4,
                actual: input_shape.len(),
            });
        }
        if self.filters.rank() != 4 {
            return Err(LayerError::RankMismatch {
                op: OP,
                expected: 4,
                actual: self.filters.rank(),
            });
        }
        let (batch, in_h, in_w, in_c) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let fs = self.filters.shape();
        let (out_c, kh, kw, icpg) = (fs[0], fs[1], fs[2], fs[3]);
        if self.groups == 0 {
            return Err(LayerError::InvalidParam {
                op: OP,
                name: "groups",
                reason: "must be at least 1".into(),
            });
        }
        if out_c % self.groups != 0 {
            return Err(LayerError::InvalidParam {
                op: OP,
                name: "groups",
                reason: format!("{} output channels not divisible by {}", out_c, self.groups),
            });
        }
        if in_c != icpg * self.groups {
            return Err(LayerError::DimMismatch {
                op: OP,
                axis: "input channels",
                expected: icpg * self.groups,
                actual: in_c,
            });
        }
        if self.bias.rank() != 1 || self.bias.len() != out_c {
            return Err(LayerError::DimMismatch {
                op: OP,
                axis: "bias length",
                expected: out_c,
                actual: self.bias.len(),
            });
        }
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 {
            return Err(LayerError::InvalidParam {
                op: OP,
                name: "stride",
                reason: "must be at least 1".into(),
            });
        }
        let (ph, pw) = self.padding;
        let padded_h = in_h + 2 * ph;
        let padded_w = in_w + 2 * pw;
        if padded_h < kh {
            return Err(LayerError::WindowTooLarge {
                op: OP,
                axis: "padded height",
                size: padded_h,
                window: "kernel",
                k: kh,
            });
        }
        if padded_w < kw {
            return Err(LayerError::WindowTooLarge {
                op: OP,
                axis: "padded width",
                size: padded_w,
                window: "kernel",
                k: kw,
            });
        }
        let out_h = (padded_h - kh) / sh + 1;
        let out_w = (padded_w - kw) / sw + 1;
        let npg = out_c / self.groups;
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            icpg,
            out_h,
            out_w,
            out_c,
            npg,
            m: out_h * out_w,
            k: kh * kw * icpg,
        })
    }

    /// `(out_h, out_w)` for an input of `in_h x in_w`, without running.
    pub fn out_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize), LayerError> {
        let g = self.geometry(&[1, in_h, in_w, self.filters.shape()[3] * self.groups])?;
        Ok((g.out_h, g.out_w))
    }
}

/// Gradients of the convolution with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Fills `col` (an `m x k` patch matrix) for one batch item and group.
/// Out-of-bounds taps (padding) contribute zeros.
fn im2col<T: Real>(input: &[T], geom: &ConvGeom, group: usize, sh: usize, sw: usize, ph: usize, pw: usize, col: &mut [T]) {
    let c0 = group * geom.icpg;
    col.fill(T::zero());
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = (oy * geom.out_w + ox) * geom.k;
            for ky in 0..geom.kh {
                let iy = (oy * sh + ky) as isize - ph as isize;
                if iy < 0 || iy >= geom.in_h as isize {
                    continue;
                }
                for kx in 0..geom.kw {
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    if ix < 0 || ix >= geom.in_w as isize {
                        continue;
                    }
                    let src = ((iy as usize * geom.in_w) + ix as usize) * geom.in_c + c0;
                    let dst = row + (ky * geom.kw + kx) * geom.icpg;
                    col[dst..dst + geom.icpg].copy_from_slice(&input[src..src + geom.icpg]);
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one batch item.
/// Gradients that fell on padding are dropped.
fn col2im_add<T: Real>(dcol: &[T], geom: &ConvGeom, group: usize, sh: usize, sw: usize, ph: usize, pw: usize, dinput: &mut [T]) {
    let c0 = group * geom.icpg;
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = (oy * geom.out_w + ox) * geom.k;
            for ky in 0..geom.kh {
                let iy = (oy * sh + ky) as isize - ph as isize;
                if iy < 0 || iy >= geom.in_h as isize {
                    continue;
                }
                for kx in 0..geom.kw {
                    let ix = (ox * sw + kx) as isize - pw as isize;
                    if ix < 0 || ix >= geom.in_w as isize {
                        continue;
                    }
                    let dst = ((iy as usize * geom.in_w) + ix as usize) * geom.in_c + c0;
                    let src = row + (ky * geom.kw + kx) * geom.icpg;
                    for c in 0..geom.icpg {
                        dinput[dst + c] += dcol[src + c];
                    }
                }
            }
        }
    }
}

/// Filters for one group transposed to `k x npg`, so the forward pass can
/// accumulate whole output-channel rows with unit stride.
fn transpose_group_filters<T: Real>(filters: &Tensor<T>, geom: &ConvGeom, group: usize) -> Vec<T> {
    let f = filters.data();
    let mut t = vec![T::zero(); geom.k * geom.npg];
    for n in 0..geom.npg {
        let row = (group * geom.npg + n) * geom.k;
        for k in 0..geom.k {
            t[k * geom.npg + n] = f[row + k];
        }
    }
    t
}

pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>, LayerError> {
    let geom = params.geometry(input.shape())?;
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;
    let filt_t: Vec<Vec<T>> = (0..params.groups)
        .map(|g| transpose_group_filters(&params.filters, &geom, g))
        .collect();
    let bias = params.bias.data();
    let in_data = input.data();
    let item_in = geom.in_h * geom.in_w * geom.in_c;
    let item_out = geom.out_h * geom.out_w * geom.out_c;

    let mut out = Tensor::zeros(&[geom.batch, geom.out_h, geom.out_w, geom.out_c])?;
    for_each_chunk(out.data_mut(), item_out, |b, out_item| {
        let item = &in_data[b * item_in..(b + 1) * item_in];
        let mut col = vec![T::zero(); geom.m * geom.k];
        for (g, ft) in filt_t.iter().enumerate() {
            im2col(item, &geom, g, sh, sw, ph, pw, &mut col);
            let bias_g = &bias[g * geom.npg..(g + 1) * geom.npg];
            for m in 0..geom.m {
                let acc = &mut out_item[m * geom.out_c + g * geom.npg..][..geom.npg];
                acc.copy_from_slice(bias_g);
                let row = &col[m * geom.k..(m + 1) * geom.k];
                for (k, &v) in row.iter().enumerate() {
                    let fr = &ft[k * geom.npg..(k + 1) * geom.npg];
                    for (a, &f) in acc.iter_mut().zip(fr) {
                        *a += v * f;
                    }
                }
            }
        }
    });
    debug_assert!(out.all_finite(), "conv2d produced a non-finite value");
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, LayerError> {
    let geom = params.geometry(input.shape())?;
    let expected = [geom.batch, geom.out_h, geom.out_w, geom.out_c];
    if grad_out.shape() != expected {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "gradient elements",
            expected: expected.iter().product(),
            actual: grad_out.len(),
        });
    }
    let (sh, sw) = params.stride;
    let (ph, pw) = params.padding;
    let filt = params.filters.data();
    let go = grad_out.data();
    let in_data = input.data();
    let item_in = geom.in_h * geom.in_w * geom.in_c;
    let item_out = geom.out_h * geom.out_w * geom.out_c;

    // Input gradient: batch items are disjoint, so this pass parallelizes
    // over items with a serial inner loop.
    let mut dinput = Tensor::zeros(input.shape())?;
    for_each_chunk(dinput.data_mut(), item_in, |b, din_item| {
        let go_item = &go[b * item_out..(b + 1) * item_out];
        let mut dcol = vec![T::zero(); geom.m * geom.k];
        for g in 0..params.groups {
            dcol.fill(T::zero());
            for m in 0..geom.m {
                let go_row = &go_item[m * geom.out_c + g * geom.npg..][..geom.npg];
                let drow = &mut dcol[m * geom.k..(m + 1) * geom.k];
                for (n, &gv) in go_row.iter().enumerate() {
                    let frow = &filt[(g * geom.npg + n) * geom.k..][..geom.k];
                    for (d, &f) in drow.iter_mut().zip(frow) {
                        *d += gv * f;
                    }
                }
            }
            col2im_add(&dcol, &geom, g, sh, sw, ph, pw, din_item);
        }
    });

    // Filter/bias gradients accumulate across the batch in ascending
    // order. Output-channel rows are disjoint, so each item's update
    // parallelizes over channel chunks without reordering any sum.
    let mut dfilters = Tensor::zeros(params.filters.shape())?;
    let mut dbias = Tensor::zeros(params.bias.shape())?;
    let mut col = vec![T::zero(); geom.m * geom.k];
    for b in 0..geom.batch {
        let item = &in_data[b * item_in..(b + 1) * item_in];
        let go_item = &go[b * item_out..(b + 1) * item_out];
        for g in 0..params.groups {
            im2col(item, &geom, g, sh, sw, ph, pw, &mut col);
            let col_ref = &col;
            let dbias_g = &mut dbias.data_mut()[g * geom.npg..(g + 1) * geom.npg];
            let dfilt_g = &mut dfilters.data_mut()[g * geom.npg * geom.k..(g + 1) * geom.npg * geom.k];
            for_each_chunk(dfilt_g, geom.k, |n, dw_row| {
                for m in 0..geom.m {
                    let gv = go_item[m * geom.out_c + g * geom.npg + n];
                    let crow = &col_ref[m * geom.k..(m + 1) * geom.k];
                    for (d, &cv) in dw_row.iter_mut().zip(crow) {
                        *d += gv * cv;
                    }
                }
            });
            for m in 0..geom.m {
                let go_row = &go_item[m * geom.out_c + g * geom.npg..][..geom.npg];
                for (dbv, &gv) in dbias_g.iter_mut().zip(go_row) {
                    *dbv += gv;
                }
            }
        }
    }

    debug_assert!(
        dinput.all_finite() && dfilters.all_finite() && dbias.all_finite(),
        "conv2d_backward produced a non-finite value"
    );
    Ok(ConvGrads {
        input: dinput,
        filters: dfilters,
        bias: dbias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(
        filters: Tensor<f64>,
        bias_len: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> ConvParams<f64> {
        ConvParams {
            filters,
            bias: Tensor::zeros(&[bias_len]).unwrap(),
            stride: (stride, stride),
            padding: (pad, pad),
            groups,
        }
    }

    /// Plain seven-loop convolution used as an oracle.
    fn conv_reference(input: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let [b, ih, iw, _ic] = [
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        ];
        let fs = p.filters.shape();
        let (oc, kh, kw, icpg) = (fs[0], fs[1], fs[2], fs[3]);
        let npg = oc / p.groups;
        let (sh, sw) = p.stride;
        let (ph, pw) = p.padding;
        let oh = (ih + 2 * ph - kh) / sh + 1;
        let ow = (iw + 2 * pw - kw) / sw + 1;
        let mut out = Tensor::zeros(&[b, oh, ow, oc]).unwrap();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..oc {
                        let g = o / npg;
                        let mut acc = p.bias.data()[o];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for c in 0..icpg {
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if iy < 0 || iy >= ih as isize || ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let iv =
                                        input.at4(bi, iy as usize, ix as usize, g * icpg + c);
                                    let fv = p.filters.data()
                                        [((o * kh + ky) * kw + kx) * icpg + c];
                                    acc += iv * fv;
                                }
                            }
                        }
                        let off = out.offset4(bi, oy, ox, o);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream(seed, 0xC0, &[]);
        Tensor::from_fn(shape, |_| {
            use rand::Rng;
            rng.random_range(-1.0..1.0)
        })
        .unwrap()
    }

    #[test]
    fn window_sums_over_a_ramp() {
        // 4x4 single-channel ramp 0..16, all-ones 3x3 filter, stride 1,
        // no padding: each output is the sum of a 3x3 window.
        let input = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64).unwrap();
        let p = params(Tensor::filled(&[1, 3, 3, 1], 1.0).unwrap(), 1, 1, 0, 1);
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 1]);
        assert_eq!(out.data(), &[45.0, 54.0, 81.0, 90.0]);
    }

    #[test]
    fn delta_kernel_with_padding_is_identity() {
        let input = pseudo_random(&[2, 5, 5, 1], 11);
        let mut filt = Tensor::zeros(&[1, 3, 3, 1]).unwrap();
        let center = (1 * 3 + 1) * 1;
        filt.data_mut()[center] = 1.0;
        let p = params(filt, 1, 1, 1, 1);
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.shape(), input.shape());
        for (a, b) in out.data().iter().zip(input.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn stride_four_no_padding_shape() {
        let input = Tensor::<f64>::zeros(&[1, 227, 227, 3]).unwrap();
        let p = params(Tensor::zeros(&[96, 11, 11, 3]).unwrap(), 96, 4, 0, 1);
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.shape(), &[1, 55, 55, 96]);
    }

    #[test]
    fn bias_shifts_each_output_channel() {
        let input = Tensor::<f64>::zeros(&[1, 3, 3, 2]).unwrap();
        let mut p = params(Tensor::zeros(&[2, 1, 1, 2]).unwrap(), 2, 1, 0, 1);
        p.bias = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let out = conv2d(&input, &p).unwrap();
        for m in 0..9 {
            assert_eq!(out.data()[2 * m], 0.5);
            assert_eq!(out.data()[2 * m + 1], -1.5);
        }
    }

    #[test]
    fn matches_reference_on_random_cases() {
        let cases = [
            // (batch, ih, iw, ic, oc, kh, stride, pad, groups)
            (2, 7, 7, 3, 4, 3, 1, 0, 1),
            (1, 9, 8, 4, 6, 3, 2, 1, 2),
            (3, 6, 6, 6, 9, 2, 1, 2, 3),
            (1, 11, 5, 2, 8, 5, 3, 2, 2),
        ];
        for (i, &(b, ih, iw, ic, oc, k, s, pad, g)) in cases.iter().enumerate() {
            let input = pseudo_random(&[b, ih, iw, ic], 100 + i as u64);
            let mut p = params(
                pseudo_random(&[oc, k, k, ic / g], 200 + i as u64),
                oc,
                s,
                pad,
                g,
            );
            p.bias = pseudo_random(&[oc], 300 + i as u64);
            let got = conv2d(&input, &p).unwrap();
            let want = conv_reference(&input, &p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} in case {i}");
            }
        }
    }

    #[test]
    fn grouped_equals_block_diagonal_ungrouped() {
        // groups=2 must equal groups=1 with filters zero-padded to a
        // block-diagonal channel layout.
        let input = pseudo_random(&[2, 6, 6, 4], 42);
        let mut grouped = params(pseudo_random(&[6, 3, 3, 2], 43), 6, 1, 1, 2);
        grouped.bias = pseudo_random(&[6], 44);

        let mut full = Tensor::zeros(&[6, 3, 3, 4]).unwrap();
        for o in 0..6 {
            let g = o / 3;
            for ky in 0..3 {
                for kx in 0..3 {
                    for c in 0..2 {
                        let src = ((o * 3 + ky) * 3 + kx) * 2 + c;
                        let dst = ((o * 3 + ky) * 3 + kx) * 4 + g * 2 + c;
                        full.data_mut()[dst] = grouped.filters.data()[src];
                    }
                }
            }
        }
        let ungrouped = ConvParams {
            filters: full,
            bias: grouped.bias.clone(),
            stride: (1, 1),
            padding: (1, 1),
            groups: 1,
        };
        let a = conv2d(&input, &grouped).unwrap();
        let b = conv2d(&input, &ungrouped).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_bias_gradient_sums_upstream() {
        let input = pseudo_random(&[2, 5, 5, 2], 7);
        let p = params(pseudo_random(&[3, 3, 3, 2], 8), 3, 1, 0, 1);
        let go = Tensor::filled(&[2, 3, 3, 3], 1.0).unwrap();
        let grads = conv2d_backward(&input, &p, &go).unwrap();
        // 2 items * 9 output pixels, upstream gradient 1 everywhere.
        assert_eq!(grads.bias.data(), &[18.0, 18.0, 18.0]);
        assert_eq!(grads.input.shape(), input.shape());
        assert_eq!(grads.filters.shape(), p.filters.shape());
    }

    #[test]
    fn channel_mismatch_names_the_axis() {
        let input = Tensor::<f64>::zeros(&[1, 5, 5, 3]).unwrap();
        let p = params(Tensor::zeros(&[4, 3, 3, 2]).unwrap(), 4, 1, 0, 1);
        let err = conv2d(&input, &p).unwrap_err();
        assert_eq!(
            err,
            LayerError::DimMismatch {
                op: "conv2d",
                axis: "input channels",
                expected: 2,
                actual: 3
            }
        );
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let input = Tensor::<f64>::zeros(&[1, 2, 2, 1]).unwrap();
        let p = params(Tensor::zeros(&[1, 5, 5, 1]).unwrap(), 1, 1, 1, 1);
        assert!(matches!(
            conv2d(&input, &p).unwrap_err(),
            LayerError::WindowTooLarge { axis: "padded height", size: 4, k: 5, .. }
        ));
    }
}
