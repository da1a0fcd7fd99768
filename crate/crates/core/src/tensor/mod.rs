//! Dense `f64` tensors and a define-by-run reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: a shape and a contiguous row-major buffer.
//! Differentiable computation happens on a [`Tape`], which records every
//! operation applied to [`Var`] handles and replays the backward rules in
//! reverse order when [`Tape::backward`] is called.
//!
//! ```
//! use la2former::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(&[1], vec![3.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).data(), &[6.0]);
//! ```

mod broadcast;
mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op} produced a non-finite value from finite inputs")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
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

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis (1 for rank-0 tensors).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a multi-index. Panics on a malformed index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Row `r` of the tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Plain (non-recorded) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k, n) = match (self.shape.as_slice(), other.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: self.shape.clone(),
                    rhs: other.shape.clone(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            &self.data,
            &other.data,
            &mut out,
            kernels::GemmDims {
                m,
                k,
                n,
                trans_a: false,
                trans_b: false,
            },
            false,
        );
        Tensor::new(&[m, n], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(&[0, 1]), 2.0);
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, 2.0, 3.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn empty_tensor() {
        let t = Tensor::new(&[0], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
        assert_eq!(t.shape(), &[0]);
    }

    #[test]
    fn plain_matmul() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert!(a.matmul(&a).is_err());
    }
}
