//! Shared numeric kernels: matrix-vector products, stable softmax, squared
//! norms, and seeded Gaussian sampling.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

/// Dense matrix-vector product. `m` must be rank 2 and `v` rank 1 with
/// matching inner dimension.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::config(format!(
            "matvec expects a rank-2 matrix, got rank {}",
            m.rank()
        )));
    }
    if v.rank() != 1 {
        return Err(Error::config(format!(
            "matvec expects a rank-1 vector, got rank {}",
            v.rank()
        )));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if cols != v.len() {
        return Err(Error::config(format!(
            "matvec dimension mismatch: matrix is {rows}x{cols}, vector has length {}",
            v.len()
        )));
    }
    let mut out = vec![0.0; rows];
    matvec_into(&mut out, m.as_slice(), rows, cols, v.as_slice());
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("matvec", "non-finite output".to_string()));
    }
    Tensor::new(vec![rows], out)
}

/// Accumulation order is fixed: row by row, left to right.
pub(crate) fn matvec_into(out: &mut [f64], m: &[f64], rows: usize, cols: usize, v: &[f64]) {
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    for (r, slot) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v.iter()) {
            acc += a * b;
        }
        *slot = acc;
    }
}

/// Numerically stable softmax: shifts by the maximum before exponentiating.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::config("softmax of an empty vector".to_string()));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("softmax", "non-finite input".to_string()));
    }
    let mut out = vec![0.0; scores.len()];
    softmax_into(&mut out, scores);
    Ok(out)
}

pub(crate) fn softmax_into(out: &mut [f64], scores: &[f64]) {
    debug_assert_eq!(out.len(), scores.len());
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (slot, &s) in out.iter_mut().zip(scores.iter()) {
        let e = (s - max).exp();
        *slot = e;
        sum += e;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
}

/// Sum of squares, accumulated left to right.
pub fn l2_norm_sq(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in v {
        acc += x * x;
    }
    acc
}

/// Draws `len` independent N(0, sigma^2) values. `sigma == 0` returns exact
/// zeros without consuming the generator.
pub fn gaussian_vector(rng: &mut SeededRng, len: usize, sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::config(format!(
            "gaussian sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let z: f64 = StandardNormal.sample(rng);
        out.push(z * sigma);
    }
    Ok(out)
}

/// Overflow-safe logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
