//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! returns [`Gradients`] for every leaf that requires them.
//!
//! Tensors are at most two-dimensional for arithmetic purposes: any shape is
//! viewed as `rows x cols` with `cols` the last dimension, and elementwise
//! binary operations broadcast a dimension of size one.
//!
//! ```
//! use momentum_transformer::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().values(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major block of `f64` values with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], values: vec![value] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Tensor { shape: vec![n, n], values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// `(rows, cols)` view: the last dimension is `cols`, everything before
    /// it is flattened into `rows`. Scalars are `1 x 1`.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `out += a (m x k) * b (k x n)`, all row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    kernels::gemm_acc(m, k, n, kernels::View::row_major(a, k), kernels::View::row_major(b, n), out);
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&cols, rest)) => (rest.iter().product(), cols),
    }
}

#[cfg(test)]
mod tests;
