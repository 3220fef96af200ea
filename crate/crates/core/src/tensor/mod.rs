//! Minimal reverse-mode differentiable tensor engine.
//!
//! Values are dense row-major `f64` arrays. Computations are recorded on a
//! [`Tape`] as they run; [`Tape::backward`] walks the recording in reverse and
//! accumulates gradients for every node that depends on a [`Parameter`].
//!
//! ```
//! use pedformer::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data()[0], 6.0);
//! ```

mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_where, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{log_cosh, Gradients, OpKind, Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1×n matrix.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Contract("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Rows of a 2-D tensor; 1 for a vector.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Splits along `axis` into pieces with the given extents.
    pub fn split(&self, axis: usize, extents: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.shape.len() || extents.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::Contract(format!(
                "cannot split {:?} along axis {axis} into {extents:?}",
                self.shape
            )));
        }
        let (outer, _, inner) = axis_strides(&self.shape, axis);
        let n = self.shape[axis];
        let mut out = Vec::with_capacity(extents.len());
        let mut start = 0;
        for &len in extents {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&self.data[base..base + len * inner]);
            }
            let mut shape = self.shape.clone();
            shape[axis] = len;
            out.push(Tensor { shape, data });
            start += len;
        }
        Ok(out)
    }
}

/// `(outer, axis_len, inner)` for iterating slices along one axis.
pub(crate) fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
