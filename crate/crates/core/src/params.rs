//! Flat parameter vectors with a named layout.
//!
//! Model parameters live in one contiguous `Vec<f64>` so that aggregation,
//! clipping, noise, masking, and compression can treat them uniformly. A
//! [`Layout`] maps names to (offset, rows, cols) regions; named views are
//! plain reborrows of the flat storage.

use crate::error::{Error, Result};
use crate::math;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder {
            entries: Vec::new(),
            total: 0,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&LayoutEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::config(format!("unknown parameter region '{name}'")))
    }
}

pub struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl LayoutBuilder {
    /// Appends a matrix region. Vectors are (len, 1), scalars (1, 1).
    pub fn push(mut self, name: &'static str, rows: usize, cols: usize) -> Self {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter region '{name}'"
        );
        debug_assert!(rows > 0 && cols > 0);
        self.entries.push(LayoutEntry {
            name,
            offset: self.total,
            rows,
            cols,
        });
        self.total += rows * cols;
        self
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout {
            entries: self.entries,
            total: self.total,
        })
    }
}

/// Flat parameter storage plus its layout. All values stay finite; arithmetic
/// helpers check layout compatibility before touching data.
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.data == other.data
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.total_len()];
        ParamVector { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::config(format!(
                "parameter data length {} does not match layout length {}",
                data.len(),
                layout.total_len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "parameter construction",
                format!("non-finite value at flat index {pos}"),
            ));
        }
        Ok(ParamVector { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// Named read view into the flat storage.
    pub fn view(&self, name: &str) -> Result<&[f64]> {
        let e = self.layout.entry(name)?;
        Ok(&self.data[e.offset..e.offset + e.len()])
    }

    pub fn view_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let e = self.layout.entry(name)?.clone();
        Ok(&mut self.data[e.offset..e.offset + e.len()])
    }

    /// self += a * x, where x is a flat delta of matching length.
    pub fn axpy(&mut self, a: f64, x: &[f64]) -> Result<()> {
        if x.len() != self.data.len() {
            return Err(Error::config(format!(
                "delta length {} does not match parameter length {}",
                x.len(),
                self.data.len()
            )));
        }
        for (p, &d) in self.data.iter_mut().zip(x.iter()) {
            *p += a * d;
        }
        Ok(())
    }

    /// Flat difference self - base, the upload payload domain.
    pub fn delta_from(&self, base: &ParamVector) -> Result<Vec<f64>> {
        if !self.same_layout(base) {
            return Err(Error::config(
                "delta between parameter vectors with different layouts".to_string(),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(base.data.iter())
            .map(|(a, b)| a - b)
            .collect())
    }

    pub fn l2_norm_sq(&self) -> f64 {
        math::l2_norm_sq(&self.data)
    }
}

/// Gradients share storage layout with the parameters they differentiate.
pub type Gradient = ParamVector;
