//! Dense f64 tensors, a reverse-mode gradient tape, parameters and the SGD optimizer.
//!
//! Tensors are plain row-major value arrays. Differentiable computation happens on a
//! [`Tape`]: every operation records its inputs so that [`Tape::backward`] can
//! accumulate exact analytic gradients. Trainable weights live in a [`ParamStore`]
//! and are loaded onto a tape per forward pass; the tape is dropped afterwards.

mod gradcheck;
mod kernels;
mod ops;
mod optim;
mod param;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::NORM_EPS;
pub use optim::{sgd_step, LrSchedule};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("tensor extents must be positive");
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A rank-1 tensor holding `values`.
    pub fn from_vec(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "tensor extents must be positive");
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < extent, "index {ix} out of range on axis {i}");
            flat = flat * extent + ix;
        }
        self.data[flat]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}
