//! Dense 32-bit tensors and a small reverse-mode differentiation engine.
//!
//! Values are stored as flat `f32` buffers in row-major order. Reductions
//! (sums, means, softmax normalizers, log-sum-exp) accumulate in `f64`
//! before rounding back to `f32`, which keeps long chains of small
//! contributions from drifting.

mod adam;
mod gradcheck;
mod graph;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Bindings, Graph, NodeId};
pub use params::{GradMap, ParamSet, Parameter};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported operand shape {shape:?}")]
    BadOperand { op: &'static str, shape: Vec<usize> },
    #[error("input `{0}` was never bound")]
    UnboundInput(String),
    #[error("input `{name}` bound with shape {bound:?}, declared {declared:?}")]
    BindingShape {
        name: String,
        bound: Vec<usize>,
        declared: Vec<usize>,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        actual: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node was not evaluated before backward")]
    NotEvaluated,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gradient check epsilon {0} outside [1e-5, 1e-2]")]
    BadEpsilon(f32),
}

/// Dense n-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
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

    /// Scalar readout; panics if the tensor holds more than one value.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}
