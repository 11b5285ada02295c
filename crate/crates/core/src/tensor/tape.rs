use rand::Rng;

use super::kernels::{gemm_acc, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    Dropout { input: Var, mask: Vec<f64> },
    Embedding { table: Var, row: usize },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`]; `None` for constants
    /// and interior nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

struct Broadcast {
    rows: usize,
    cols: usize,
    shape: Vec<usize>,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    #[inline]
    fn index(dims: (usize, usize), i: usize, j: usize) -> usize {
        let r = if dims.0 == 1 { 0 } else { i };
        let c = if dims.1 == 1 { 0 } else { j };
        r * dims.1 + c
    }
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    let (Some(rows), Some(cols)) = (pick(ra, rb), pick(ca, cb)) else {
        return Err(Error::dim(op, &[a.shape(), b.shape()]));
    };
    let shape = if a.shape() == b.shape() || (ra, ca) == (rows, cols) {
        a.shape().to_vec()
    } else if (rb, cb) == (rows, cols) {
        b.shape().to_vec()
    } else {
        vec![rows, cols]
    };
    Ok(Broadcast { rows, cols, shape, a: (ra, ca), b: (rb, cb) })
}

/// Sum a broadcast output gradient back down to an operand's dims.
fn reduce_to(g: &[f64], rows: usize, cols: usize, dims: (usize, usize), scale: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    if dims == (rows, cols) {
        return g.iter().enumerate().map(|(k, &v)| scale(k, v)).collect();
    }
    let mut out = vec![0.0; dims.0 * dims.1];
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            out[Broadcast::index(dims, i, j)] += scale(k, g[k]);
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Adds `rows` blocks of `width` values from `g` into the gradient of
/// `var` (total length `len`), block `i` starting at `offset + i * stride`.
fn accumulate_strided(
    grads: &mut [Option<Vec<f64>>],
    var: Var,
    len: usize,
    (offset, stride, width): (usize, usize, usize),
    g: &[f64],
) {
    let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
    for (i, block) in g.chunks(width).enumerate() {
        let start = offset + i * stride;
        for (e, v) in slot[start..start + width].iter_mut().zip(block) {
            *e += v;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() > 2 || tb.shape().len() > 2 {
            return Err(Error::dim("matmul", &[ta.shape(), tb.shape()]));
        }
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(Error::dim("matmul", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, View::row_major(ta.values(), k), View::row_major(tb.values(), n), &mut out);
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], values: out }, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() > 2 {
            return Err(Error::dim("transpose", &[ta.shape()]));
        }
        let (r, c) = ta.dims2();
        let src = ta.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], values: out }, Op::Transpose(a), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast(name, ta, tb)?;
        let values = if ta.shape() == tb.shape() {
            ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (va, vb) = (ta.values(), tb.values());
            let mut out = Vec::with_capacity(bc.rows * bc.cols);
            for i in 0..bc.rows {
                for j in 0..bc.cols {
                    out.push(f(va[Broadcast::index(bc.a, i, j)], vb[Broadcast::index(bc.b, i, j)]));
                }
            }
            out
        };
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(Tensor { shape: bc.shape, values }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("elementwise_mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let values = ta.values().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.grad_any(&[a]);
        self.push(Tensor { shape, values }, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    /// `a + offset` for a constant offset.
    pub fn offset(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, |x| x + offset, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let src = ta.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let shape = ta.shape().to_vec();
        let rg = self.grad_any(&[a]);
        self.push(Tensor { shape, values: out }, Op::Softmax(a), rg)
    }

    /// Normalizes each row to zero mean and unit population variance
    /// (no affine transform).
    pub fn layer_norm_lastdim(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let src = ta.values();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (d, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *d = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = ta.shape().to_vec();
        let rg = self.grad_any(&[a]);
        self.push(Tensor { shape, values: out }, Op::LayerNorm { input: a, inv_std }, rg)
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat_lastdim of zero tensors".into()));
        };
        let rows = self.value(*first).rows();
        let mut cols = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                let shapes: Vec<&[usize]> = parts.iter().map(|v| self.value(*v).shape()).collect();
                return Err(Error::dim("concat_lastdim", &shapes));
            }
            cols.push(t.cols());
        }
        let total: usize = cols.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let rg = self.grad_any(parts);
        Ok(self.push(Tensor { shape: vec![rows, total], values: out }, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        };
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                let shapes: Vec<&[usize]> = parts.iter().map(|v| self.value(*v).shape()).collect();
                return Err(Error::dim("concat_rows", &shapes));
            }
            rows += t.rows();
            out.extend_from_slice(t.values());
        }
        let rg = self.grad_any(parts);
        Ok(self.push(Tensor { shape: vec![rows, cols], values: out }, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Copies columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if start + len > c || len == 0 {
            return Err(Error::dim("slice", &[ta.shape(), &[start, len]]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ta.values()[i * c + start..i * c + start + len]);
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(Tensor { shape: vec![r, len], values: out }, Op::SliceCols { input: a, start }, rg))
    }

    /// Copies rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if start + len > r || len == 0 {
            return Err(Error::dim("slice", &[ta.shape(), &[start, len]]));
        }
        let values = ta.values()[start * c..(start + len) * c].to_vec();
        let rg = self.grad_any(&[a]);
        Ok(self.push(Tensor { shape: vec![len, c], values }, Op::SliceRows { input: a, start }, rg))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. A zero rate is the identity.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.numel()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let values = ta.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = ta.shape().to_vec();
        let rg = self.grad_any(&[a]);
        Ok(self.push(Tensor { shape, values }, Op::Dropout { input: a, mask }, rg))
    }

    /// Selects one row of an embedding table as a `1 x d` tensor.
    pub fn embedding_lookup(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = t.dims2();
        if row >= r {
            return Err(Error::dim("embedding_lookup", &[t.shape(), &[row]]));
        }
        let values = t.row(row).to_vec();
        let rg = self.grad_any(&[table]);
        Ok(self.push(Tensor { shape: vec![1, c], values }, Op::Embedding { table, row }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum::<f64>();
        let rg = self.grad_any(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", value.shape())));
        }
        let seed = Tensor::full(value.shape(), 1.0);
        self.backward_with_seed(loss, &seed)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// to every differentiable leaf. Consumes the tape.
    pub fn backward_with_seed(self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.value(output).numel() != seed.numel() {
            return Err(Error::dim("backward", &[self.value(output).shape(), seed.shape()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.values().to_vec());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[idx].take() {
                self.propagate(idx, &g, &mut grads);
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    values: g.unwrap_or_else(|| vec![0.0; node.value.numel()]),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.values();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, View::row_major(g, n), View::transposed(tb.values(), n), &mut ga);
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, View::transposed(ta.values(), k), View::row_major(g, n), &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, cols) = node.value.dims2();
                let (da, db) = (ta.dims2(), tb.dims2());
                let (va, vb) = (ta.values(), tb.values());
                let at = |dims, k: usize| Broadcast::index(dims, k / cols, k % cols);
                if wants(*a) {
                    let ga = match &node.op {
                        Op::Mul(..) => reduce_to(g, rows, cols, da, |k, v| v * vb[at(db, k)]),
                        Op::Div(..) => reduce_to(g, rows, cols, da, |k, v| v / vb[at(db, k)]),
                        _ => reduce_to(g, rows, cols, da, |_, v| v),
                    };
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let gb = match &node.op {
                        Op::Sub(..) => reduce_to(g, rows, cols, db, |_, v| -v),
                        Op::Mul(..) => reduce_to(g, rows, cols, db, |k, v| v * va[at(da, k)]),
                        Op::Div(..) => reduce_to(g, rows, cols, db, |k, v| {
                            let y = vb[at(db, k)];
                            -v * va[at(da, k)] / (y * y)
                        }),
                        _ => reduce_to(g, rows, cols, db, |_, v| v),
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::Offset(a) => accumulate(grads, *a, g.to_vec()),
            Op::Sigmoid(a) => accumulate(grads, *a, g.iter().zip(out).map(|(v, y)| v * y * (1.0 - y)).collect()),
            Op::Tanh(a) => accumulate(grads, *a, g.iter().zip(out).map(|(v, y)| v * (1.0 - y * y)).collect()),
            Op::Elu(a) => {
                let x = self.value(*a).values();
                let ga = g.iter().zip(out).zip(x).map(|((v, y), x)| if *x > 0.0 { *v } else { v * (y + 1.0) }).collect();
                accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => accumulate(grads, *a, g.iter().zip(out).map(|(v, y)| v / (2.0 * y)).collect()),
            Op::Abs(a) => {
                let x = self.value(*a).values();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(v, x)| if *x > 0.0 { *v } else if *x < 0.0 { -v } else { 0.0 })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).values();
                let ga = g.iter().zip(x).map(|(v, x)| if *x >= *lo && *x <= *hi { *v } else { 0.0 }).collect();
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let (gy, y) = (&g[i * c..(i + 1) * c], &out[i * c..(i + 1) * c]);
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { input, inv_std } => {
                let (r, c) = node.value.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let (gy, y) = (&g[i * c..(i + 1) * c], &out[i * c..(i + 1) * c]);
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[i * c + j] = inv_std[i] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                accumulate(grads, *input, ga);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if wants(*p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if wants(*p) {
                        accumulate(grads, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols { input, start } => {
                let (r, c) = self.value(*input).dims2();
                let len = node.value.cols();
                accumulate_strided(grads, *input, r * c, (*start, c, len), g);
            }
            Op::SliceRows { input, start } => {
                let t = self.value(*input);
                let c = t.cols();
                accumulate_strided(grads, *input, t.numel(), (start * c, g.len(), g.len()), g);
            }
            Op::Dropout { input, mask } => accumulate(grads, *input, g.iter().zip(mask).map(|(v, m)| v * m).collect()),
            Op::Embedding { table, row } => {
                let t = self.value(*table);
                let c = t.cols();
                accumulate_strided(grads, *table, t.numel(), (row * c, c, c), g);
            }
            Op::SumAll(a) => accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]),
        }
    }
}
