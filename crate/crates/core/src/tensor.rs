//! Dense row-major tensors of rank 1 to 3.

use crate::error::{Error, Result};

/// Owned dense tensor. Invariants: rank between 1 and 3, no zero dimension,
/// shape product equals the data length, and every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::config(format!(
                "tensor rank must be 1..=3, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::config(format!(
                "tensor dimensions must be nonzero, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} implies {expected} elements, data has {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "tensor construction",
                format!("non-finite value at flat index {pos}"),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
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
        // Zero dimensions are rejected at construction.
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rank-2 element accessor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }
}
