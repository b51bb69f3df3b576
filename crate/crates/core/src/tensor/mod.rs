//! Dense row-major f64 tensors, the autodiff tape, spectral features, and
//! finite-difference gradient checking.

mod gradcheck;
mod spectral;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use spectral::rdft_magnitude;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Dense tensor with row-major layout. Every constructor rejects non-finite
/// values and zero-sized dimensions, so a `Tensor` always holds usable data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n = numel_of(shape);
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.validate_finite()?;
        Ok(t)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![0.0; numel_of(shape)] })
    }

    /// Tensor filled with one value.
    pub fn from_elem(shape: &[usize], v: f64) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite fill value {v}")));
        }
        validate_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![v; numel_of(shape)] })
    }

    /// Rank-1 scalar wrapper (shape `[1]`).
    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(&[1], vec![v])
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

    /// Mutable access to the raw buffer. Callers that may introduce
    /// non-finite values must re-check with [`Tensor::validate_finite`].
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element at a multi-dimensional index.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {v} at flat index {i} in tensor of shape {:?}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute element difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot compare shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Product of dimensions.
pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Flat offset of a multi-dimensional index.
pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    let strides = strides_of(shape);
    index.iter().zip(&strides).map(|(i, s)| i * s).sum()
}

/// Decomposes a flat offset into a multi-dimensional index.
pub(crate) fn unravel(shape: &[usize], mut flat: usize, out: &mut [usize]) {
    for i in (0..shape.len()).rev() {
        out[i] = flat % shape[i];
        flat /= shape[i];
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("rank-0 tensors are not supported".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}
