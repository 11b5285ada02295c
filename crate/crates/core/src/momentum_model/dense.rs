//! Tape-free kernels for inference.

use crate::tensor::{Tensor, LAYER_NORM_EPS};

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    assert_eq!(k, k2, "dense matmul inner dimensions");
    let mut out = vec![0.0; m * n];
    crate::tensor::gemm(m, k, n, a.values(), b.values(), &mut out);
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// Adds a `1 x n` row to every row of `a` in place.
pub(crate) fn add_row(a: &mut Tensor, row: &Tensor) {
    let n = a.cols();
    let r = row.values();
    for chunk in a.values_mut().chunks_mut(n) {
        for (x, b) in chunk.iter_mut().zip(r) {
            *x += b;
        }
    }
}

pub(crate) fn add(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
        *x += y;
    }
}

pub(crate) fn map(a: &mut Tensor, f: impl Fn(f64) -> f64) {
    for x in a.values_mut() {
        *x = f(*x);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn layer_norm_rows(a: &mut Tensor) {
    let c = a.cols();
    for row in a.values_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
}

pub(crate) fn softmax_rows(a: &mut Tensor) {
    let c = a.cols();
    for row in a.values_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Rows `start..start + len` as a new tensor.
pub(crate) fn rows(a: &Tensor, start: usize, len: usize) -> Tensor {
    let c = a.cols();
    Tensor::new(vec![len, c], a.values()[start * c..(start + len) * c].to_vec()).expect("row slice")
}

pub(crate) fn col(a: &Tensor, j: usize) -> Tensor {
    let (r, c) = a.dims2();
    Tensor::new(vec![r, 1], (0..r).map(|i| a.values()[i * c + j]).collect()).expect("column slice")
}
