//! Dense row-major f32 tensors.
//!
//! `Tensor` is the universal value type: images, sinograms, feature maps,
//! parameters and gradients are all tensors. Data sits behind an `Arc` so
//! clones are cheap; mutation goes copy-on-write through [`Tensor::data_mut`].
//! Gradients are not stored on the tensor itself — the autodiff tape owns
//! them (see [`crate::tape`]), which is the same split the trainer relies on
//! for sharing read-only parameter snapshots across evaluation workers.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Structured shape mismatch: every primitive either returns its documented
/// shape or one of these, never a silently broadcast result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeError {
    /// Operand shapes are incompatible for the named operation.
    Mismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A constraint on one shape (divisibility, rank, extent) is violated.
    Constraint { op: &'static str, msg: String },
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeError::Mismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            ShapeError::Constraint { op, msg } => write!(f, "{op}: {msg}"),
        }
    }
}

impl core::error::Error for ShapeError {}

pub(crate) fn constraint(op: &'static str, msg: impl Into<String>) -> ShapeError {
    ShapeError::Constraint { op, msg: msg.into() }
}

/// Dense multi-dimensional array of 32-bit reals with row-major layout.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} values]", self.len())
        }
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    /// Builds a tensor from raw data; length must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, ShapeError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(constraint(
                "from_vec",
                alloc::format!("data length {} != shape product {}", data.len(), n),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copy-on-write mutable access.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data)
    }

    /// True when both tensors share the same allocation.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for ax in (0..self.shape.len().saturating_sub(1)).rev() {
            s[ax] = s[ax + 1] * self.shape[ax + 1];
        }
        s
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0usize;
        let mut stride = 1usize;
        for ax in (0..idx.len()).rev() {
            off += idx[ax] * stride;
            stride *= self.shape[ax];
        }
        self.data[off]
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, ShapeError> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(ShapeError::Mismatch {
                op: "reshape",
                expected: self.shape.clone(),
                got: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Axis permutation (materialises a copy).
    pub fn permute(&self, order: &[usize]) -> Result<Tensor, ShapeError> {
        if order.len() != self.rank() {
            return Err(constraint("permute", "order length must equal rank"));
        }
        let mut seen = vec![false; order.len()];
        for &ax in order {
            if ax >= order.len() || seen[ax] {
                return Err(constraint("permute", "order must be a permutation"));
            }
            seen[ax] = true;
        }
        let in_shape = &self.shape;
        let in_strides = self.strides();
        let out_shape: Vec<usize> = order.iter().map(|&ax| in_shape[ax]).collect();
        let mut out = vec![0f32; self.len()];
        let src = self.data();
        // Walk output row-major, gathering from the permuted input stride.
        let out_rank = out_shape.len();
        let perm_strides: Vec<usize> = order.iter().map(|&ax| in_strides[ax]).collect();
        let mut idx = vec![0usize; out_rank];
        for o in out.iter_mut() {
            let mut src_off = 0usize;
            for ax in 0..out_rank {
                src_off += idx[ax] * perm_strides[ax];
            }
            *o = src[src_off];
            for ax in (0..out_rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: Arc::new(out),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&x| f(x)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::Mismatch {
                op,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, ShapeError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, ShapeError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|x| x * c)
    }

    /// Sum with f64 accumulation in fixed element order.
    pub fn sum64(&self) -> f64 {
        self.data().iter().map(|&x| x as f64).sum()
    }

    pub fn mean64(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.sum64() / self.len() as f64
        }
    }

    pub fn min_value(&self) -> f32 {
        self.data().iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data().iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn abs_max(&self) -> f32 {
        self.data()
            .iter()
            .fold(0.0f32, |m, &x| m.max(crate::fmath::abs(x)))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    /// Max |a - b| over all elements.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data()
            .iter()
            .zip(other.data())
            .fold(0.0f32, |m, (&a, &b)| m.max(crate::fmath::abs(a - b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn strides_row_major() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn cow_clone_is_cheap_until_written() {
        let a = Tensor::zeros(&[4]);
        let mut b = a.clone();
        assert!(a.ptr_eq(&b));
        b.data_mut()[0] = 1.0;
        assert!(!a.ptr_eq(&b));
        assert_eq!(a.data()[0], 0.0);
    }
}
