//! Flat parameter storage with shape metadata.

use crate::error::{config, Error, Result};

use super::Matrix;

/// Shape of one contiguous segment of a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    /// Row-major `rows x cols` block.
    Matrix {
        rows: usize,
        cols: usize,
    },
    Vector(usize),
}

impl Segment {
    pub fn len(&self) -> usize {
        match *self {
            Segment::Matrix { rows, cols } => rows * cols,
            Segment::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A flat vector of `f64` parameters partitioned into shaped segments.
///
/// The shared backbone parameters and every client head are stored this way,
/// which keeps optimizer code layout-agnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(shapes: Vec<Segment>) -> Self {
        let n = shapes.iter().map(Segment::len).sum();
        Self {
            values: vec![0.0; n],
            shapes,
        }
    }

    pub fn from_parts(values: Vec<f64>, shapes: Vec<Segment>) -> Result<Self> {
        let n: usize = shapes.iter().map(Segment::len).sum();
        if n != values.len() {
            return Err(config(format!(
                "segments describe {n} values but {} were supplied",
                values.len()
            )));
        }
        Ok(Self { values, shapes })
    }

    /// A single-segment vector holding `m`.
    pub fn from_matrix(m: Matrix) -> Self {
        let shape = Segment::Matrix {
            rows: m.rows(),
            cols: m.cols(),
        };
        Self {
            values: m.into_vec(),
            shapes: vec![shape],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shapes.clone())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[Segment] {
        &self.shapes
    }

    fn offset(&self, index: usize) -> usize {
        self.shapes[..index].iter().map(Segment::len).sum()
    }

    pub fn segment(&self, index: usize) -> &[f64] {
        let start = self.offset(index);
        &self.values[start..start + self.shapes[index].len()]
    }

    pub fn segment_mut(&mut self, index: usize) -> &mut [f64] {
        let start = self.offset(index);
        let len = self.shapes[index].len();
        &mut self.values[start..start + len]
    }

    /// Copies a matrix-shaped segment out as a [`Matrix`].
    pub fn segment_matrix(&self, index: usize) -> Result<Matrix> {
        match self.shapes[index] {
            Segment::Matrix { rows, cols } => {
                Matrix::from_vec(rows, cols, self.segment(index).to_vec())
            }
            Segment::Vector(_) => Err(config(format!("segment {index} is not a matrix"))),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.shapes == other.shapes
    }

    pub fn ensure_layout(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(config(format!(
                "{what}: layout {:?} does not match {:?}",
                other.shapes, self.shapes
            )))
        }
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: coordinate {i} is {}",
                self.values[i]
            ))),
        }
    }

    /// `self += scale * other`. Layouts must match.
    pub fn add_scaled(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.ensure_layout(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest coordinate-wise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_layout(other, "max_abs_diff")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}
