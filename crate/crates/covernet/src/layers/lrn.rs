//! Across-channel local response normalization.
//!
//! For channel `i` at one pixel, with window `W(i) = [i-n, i+n]` clipped
//! to the channel range:
//!
//! ```text
//! b_i = a_i / (k + (alpha/n) * sum_{j in W(i)} a_j^2)^beta
//! ```
//!
//! The window membership is symmetric (`j in W(i)` iff `i in W(j)`), which
//! the backward pass exploits to reuse one sliding-window sum.

use crate::tensor::{Real, Tensor};

use super::LayerError;

const OP: &str = "lrn";

/// Normalization constants. `depth_radius` counts neighbors on each side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub depth_radius: usize,
    pub bias: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LrnParams {
    pub fn new(depth_radius: usize, bias: f64, alpha: f64, beta: f64) -> Result<Self, LayerError> {
        let p = Self {
            depth_radius,
            bias,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let bad = |name: &'static str, reason: &str| LayerError::InvalidParam {
            op: OP,
            name,
            reason: reason.into(),
        };
        if self.depth_radius < 1 {
            return Err(bad("depth_radius", "must be at least 1"));
        }
        if !(self.bias > 0.0) {
            return Err(bad("bias", "must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(bad("alpha", "must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(bad("beta", "must be positive"));
        }
        Ok(())
    }
}

impl Default for LrnParams {
    /// Constants used by the eight-layer network: n=5, k=2, alpha=1e-4,
    /// beta=0.75.
    fn default() -> Self {
        Self {
            depth_radius: 5,
            bias: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

fn check_rank<T: Real>(input: &Tensor<T>) -> Result<(), LayerError> {
    if input.rank() != 4 {
        return Err(LayerError::RankMismatch {
            op: OP,
            expected: 4,
            actual: input.rank(),
        });
    }
    Ok(())
}

/// Sliding clipped-window sums of `sq` (length `c`, radius `n`) into `out`.
fn window_sums<T: Real>(sq: &[T], n: usize, out: &mut [T]) {
    let c = sq.len();
    for i in 0..c {
        let lo = i.saturating_sub(n);
        let hi = (i + n).min(c - 1);
        let mut s = T::zero();
        for &v in &sq[lo..=hi] {
            s += v;
        }
        out[i] = s;
    }
}

pub fn lrn<T: Real>(input: &Tensor<T>, p: &LrnParams) -> Result<Tensor<T>, LayerError> {
    check_rank(input)?;
    let c = input.shape()[3];
    let n = p.depth_radius;
    let k = T::of_f64(p.bias);
    let scale = T::of_f64(p.alpha / p.depth_radius as f64);
    let beta = T::of_f64(-p.beta);
    let data = input.data();
    let mut out = Tensor::zeros(input.shape())?;
    let out_data = out.data_mut();
    let mut sq = vec![T::zero(); c];
    let mut sums = vec![T::zero(); c];
    for px in 0..data.len() / c {
        let a = &data[px * c..(px + 1) * c];
        for (s, &v) in sq.iter_mut().zip(a) {
            *s = v * v;
        }
        window_sums(&sq, n, &mut sums);
        let o = &mut out_data[px * c..(px + 1) * c];
        for i in 0..c {
            o[i] = a[i] * (k + scale * sums[i]).powf(beta);
        }
    }
    debug_assert!(out.all_finite(), "lrn produced a non-finite value");
    Ok(out)
}

pub fn lrn_backward<T: Real>(
    input: &Tensor<T>,
    p: &LrnParams,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    check_rank(input)?;
    if grad_out.shape() != input.shape() {
        return Err(LayerError::DimMismatch {
            op: OP,
            axis: "gradient elements",
            expected: input.len(),
            actual: grad_out.len(),
        });
    }
    let c = input.shape()[3];
    let n = p.depth_radius;
    let k = T::of_f64(p.bias);
    let scale = T::of_f64(p.alpha / p.depth_radius as f64);
    let neg_beta = T::of_f64(-p.beta);
    // Coefficient of the cross-channel term: 2 * alpha * beta / n.
    let cross = T::of_f64(2.0 * p.alpha * p.beta / p.depth_radius as f64);
    let data = input.data();
    let go = grad_out.data();
    let mut dinput = Tensor::zeros(input.shape())?;
    let din = dinput.data_mut();
    let mut sq = vec![T::zero(); c];
    let mut sums = vec![T::zero(); c];
    let mut t = vec![T::zero(); c];
    let mut tsums = vec![T::zero(); c];
    for px in 0..data.len() / c {
        let a = &data[px * c..(px + 1) * c];
        let g = &go[px * c..(px + 1) * c];
        for (s, &v) in sq.iter_mut().zip(a) {
            *s = v * v;
        }
        window_sums(&sq, n, &mut sums);
        // t_i = g_i * a_i * d_i^(-beta-1) where d_i is the normalizer.
        for i in 0..c {
            let d = k + scale * sums[i];
            let pow = d.powf(neg_beta);
            t[i] = g[i] * a[i] * pow / d;
            // Stash d^(-beta) for the diagonal term.
            sq[i] = pow;
        }
        window_sums(&t, n, &mut tsums);
        let out = &mut din[px * c..(px + 1) * c];
        for i in 0..c {
            out[i] = g[i] * sq[i] - cross * a[i] * tsums[i];
        }
    }
    Ok(dinput)
}
