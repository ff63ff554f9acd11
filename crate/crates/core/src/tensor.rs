//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is plain storage plus an optional gradient buffer. Differentiable
//! computation happens on a [`crate::autodiff::Tape`], which copies tensor values
//! in as leaves and hands gradients back out after the reverse sweep.

use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(HcpError::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(HcpError::Shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1, 1], vec![value]).expect("scalar shape")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(HcpError::Shape("ragged rows".into()));
        }
        Tensor::matrix(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as trainable (or frozen). Freezing drops any stored gradient.
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// (rows, cols) view; rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            other => Err(HcpError::Shape(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. Frozen tensors ignore the call.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(HcpError::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        if !self.requires_grad {
            return Ok(());
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Appends the rows of `other` below `self`.
    pub fn vstack(&self, other: &Tensor) -> Result<Tensor> {
        let (r1, c1) = self.dims2()?;
        let (r2, c2) = other.dims2()?;
        if c1 != c2 {
            return Err(HcpError::Shape(format!(
                "cannot stack {:?} on {:?}",
                other.shape, self.shape
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor::matrix(r1 + r2, c1, data)
    }

    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if lo >= hi || hi > r {
            return Err(HcpError::Bounds(format!(
                "row range {lo}..{hi} outside 0..{r}"
            )));
        }
        Tensor::matrix(hi - lo, c, self.data[lo * c..hi * c].to_vec())
    }

    /// Little-endian byte image of shape and values, used for bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.shape.len() + self.data.len()));
        for &s in &self.shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }
}
