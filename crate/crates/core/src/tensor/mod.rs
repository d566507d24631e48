//! Dense-tensor storage and reverse-mode automatic differentiation.
//!
//! [`TensorData`] is a plain row-major array of `f64` with a shape. The
//! differentiation machinery lives in [`tape`]: a [`tape::Tape`] records the
//! forward pass and replays it in reverse, accumulating gradients. Kernels
//! (convolution, pooling, interpolation, warping) are free functions over
//! slices in [`kernels`] so the tape and the non-differentiated code paths
//! (data synthesis, evaluation) share one implementation of each.
//!
//! Everything runs in double precision; the gradient-check tolerances in
//! [`gradcheck`] assume it.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::Grads;
pub use tape::{Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor. Volumetric data uses the canonical 5-axis layout
/// `[batch, channel, depth, height, width]`; lower ranks are allowed for
/// plain grids (`[D,H,W]`) and scalars (`[1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorData {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        TensorData {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        TensorData {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)`, consumed from `rng` in row-major order.
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        TensorData {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// The canonical volumetric layout, or a shape error for other ranks.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[b, c, d, h, w] => Ok([b, c, d, h, w]),
            other => Err(Error::shape(format!("expected 5-axis tensor, got {:?}", other))),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[d, h, w] => Ok([d, h, w]),
            other => Err(Error::shape(format!("expected 3-axis tensor, got {:?}", other))),
        }
    }

    /// Reshape without copying. The element count must not change.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}
