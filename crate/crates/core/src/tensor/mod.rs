//! Dense f32 tensors with reverse-mode differentiation.
//!
//! [`Array`] is plain row-major storage plus a shape. Differentiable
//! computation happens on a [`Tape`]: every op appends a node holding its
//! output value and enough context to run its backward rule, so one reverse
//! sweep over the node list propagates gradients (see [`tape`]). Long-lived
//! parameters live in a [`ParamStore`] outside any tape and are re-attached
//! as leaves each forward pass.

mod kernels;
mod store;
mod tape;

pub use store::{Init, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{Tape, TensorRef, IGNORE_ID};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("target id {id} out of range for {classes} classes")]
    TargetOutOfRange { id: u32, classes: usize },
    #[error("cross entropy: every row is ignored, loss undefined")]
    EmptyLoss,
    #[error("attention mask leaves query row {row} with no attendable key")]
    FullyMaskedQuery { row: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

pub type Result<T> = core::result::Result<T, TensorError>;

/// Row-major f32 storage with a shape. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D array over `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Scalar value; panics on non-scalar arrays.
    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Split the shape into (leading batch dims product, rows, cols) treating
    /// the last two axes as a matrix. Rank-1 arrays are treated as one row.
    pub(crate) fn matrix_view(&self) -> (usize, usize, usize) {
        match self.shape.len() {
            0 => (1, 1, 1),
            1 => (1, 1, self.shape[0]),
            n => {
                let rows = self.shape[n - 2];
                let cols = self.shape[n - 1];
                let batch = self.shape[..n - 2].iter().product();
                (batch, rows, cols)
            }
        }
    }

    pub(crate) fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Array::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Array::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 5, .. }));
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Array::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn matrix_view_folds_batch_dims() {
        let a = Array::zeros(&[4, 3, 2, 5]);
        assert_eq!(a.matrix_view(), (12, 2, 5));
        let b = Array::zeros(&[7]);
        assert_eq!(b.matrix_view(), (1, 1, 7));
    }
}
