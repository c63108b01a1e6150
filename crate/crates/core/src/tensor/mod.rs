//! Dense `f64` tensors and a small tape-based reverse-mode autodiff engine.
//!
//! Everything is row-major and single-threaded. Feature maps are `[C, H, W]`,
//! matrices `[rows, cols]`, convolution weights `[C_out, C_in, 3, 3]`.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use adam::{Adam, AdamConfig, AdamError};
pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};
pub use graph::{Graph, MaskedStats, Var, MASK_LARGE};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    Length { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized dimension")]
    Degenerate(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("{op}: mask must be binary (found {value} at site {index})")]
    NonBinaryMask {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateAttention { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Dense N-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches and
    /// non-finite entries.
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::Length {
                shape,
                len: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1], vec![value])
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Result<Self, TensorError> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Unchecked constructor for kernel outputs whose shape is known to match.
    pub(crate) fn raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.values.len()));
        self.grad = grad;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self::raw(shape, self.values.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::Degenerate(shape.to_vec()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_and_mismatched_shapes() {
        assert!(matches!(
            Tensor::new([2, 0], vec![]),
            Err(TensorError::Degenerate(_))
        ));
        assert!(matches!(
            Tensor::new([2, 2], vec![1.0; 3]),
            Err(TensorError::Length { .. })
        ));
        assert!(matches!(
            Tensor::new([2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite(1))
        ));
    }

    #[test]
    fn reshape_keeps_values() {
        let t = Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = t.reshape([3, 2]).unwrap();
        assert_eq!(r.values(), t.values());
        assert!(t.reshape([4, 2]).is_err());
    }
}
