//! Dense row-major tensors of rank 1..=4 over `f32` or `f64`.
//!
//! Image batches use the layout `batch x height x width x channels` with
//! the channel index fastest-varying; matrices are `rows x cols`. All
//! kernels in this crate address raw offsets into [`Tensor::data`], so the
//! layout contract here is load-bearing.

use std::fmt;

use thiserror::Error;

/// Maximum supported rank.
pub const MAX_RANK: usize = 4;

/// Floating-point element type for kernels: `f32` for training/inference,
/// `f64` for gradient verification.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (rounds to nearest for `f32`).
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("rank {0} exceeds the supported maximum of {MAX_RANK}")]
    RankTooHigh(usize),
    #[error("shape must have at least one dimension")]
    EmptyShape,
    #[error("dimension {axis} of shape {shape:?} is zero")]
    ZeroDim { shape: Vec<usize>, axis: usize },
    #[error("cannot reshape {from:?} ({from_len} elements) into {to:?} ({to_len} elements)")]
    ReshapeMismatch {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
}

/// Owned dense tensor. Cloning copies the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Validates the shape and wraps `data` without copying.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected = checked_shape(shape)?;
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let len = checked_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        })
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self, TensorError> {
        let len = checked_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// Builds a tensor by calling `f` with the flat (row-major) index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self, TensorError> {
        let len = checked_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let to_len = checked_shape(shape)?;
        if to_len != self.data.len() {
            return Err(TensorError::ReshapeMismatch {
                from: self.shape.clone(),
                from_len: self.data.len(),
                to: shape.to_vec(),
                to_len,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Flat offset of `[b][h][w][c]` in a rank-4 tensor.
    #[inline(always)]
    pub fn offset4(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((b * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }

    /// Flat offset of `[r][c]` in a rank-2 tensor.
    #[inline(always)]
    pub fn offset2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        r * self.shape[1] + c
    }

    #[inline(always)]
    pub fn at4(&self, b: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.offset4(b, h, w, c)]
    }

    #[inline(always)]
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[self.offset2(r, c)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise conversion to another float width.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of_f64(x.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ..]", self.data[0], self.data[1])
        }
    }
}

fn checked_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if shape.len() > MAX_RANK {
        return Err(TensorError::RankTooHigh(shape.len()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroDim {
            shape: shape.to_vec(),
            axis,
        });
    }
    Ok(shape.iter().product())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_element_count() {
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::ElementCount {
                shape: vec![2, 3],
                expected: 6,
                actual: 5
            }
        );
    }

    #[test]
    fn new_rejects_rank_5_and_zero_dims() {
        assert_eq!(
            Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).unwrap_err(),
            TensorError::RankTooHigh(5)
        );
        assert_eq!(
            Tensor::<f32>::zeros(&[2, 0]).unwrap_err(),
            TensorError::ZeroDim {
                shape: vec![2, 0],
                axis: 1
            }
        );
        assert_eq!(
            Tensor::<f32>::zeros(&[]).unwrap_err(),
            TensorError::EmptyShape
        );
    }

    #[test]
    fn offsets_are_row_major_with_channel_fastest() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32).unwrap();
        assert_eq!(t.at4(0, 0, 0, 0), 0.0);
        assert_eq!(t.at4(0, 0, 0, 1), 1.0);
        assert_eq!(t.at4(0, 0, 1, 0), 5.0);
        assert_eq!(t.at4(0, 1, 0, 0), 20.0);
        assert_eq!(t.at4(1, 0, 0, 0), 60.0);
        assert_eq!(t.at4(1, 2, 3, 4), 119.0);
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let t = Tensor::<f64>::from_fn(&[2, 6], |i| i as f64).unwrap();
        let r = t.clone().reshape(&[3, 4]).unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        assert_eq!(r.data(), t.data());
        assert!(matches!(
            t.reshape(&[5, 2]),
            Err(TensorError::ReshapeMismatch { .. })
        ));
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::<f32>::from_fn(&[3], |i| i as f32 * 0.25).unwrap();
        let up: Tensor<f64> = t.cast();
        let down: Tensor<f32> = up.cast();
        assert_eq!(down.data(), t.data());
    }

    #[test]
    fn all_finite_detects_nan_and_inf() {
        let mut t = Tensor::<f32>::zeros(&[4]).unwrap();
        assert!(t.all_finite());
        t.data_mut()[2] = f32::NAN;
        assert!(!t.all_finite());
        t.data_mut()[2] = f32::INFINITY;
        assert!(!t.all_finite());
    }
}
