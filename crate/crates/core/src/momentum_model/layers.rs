//! Building blocks. Each block has a tape forward for training and a dense
//! forward for inference; both compute the same function.

use rand_chacha::ChaCha8Rng;

use super::dense;
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Tape forward state: parameter handles and the dropout source (training
/// mode only).
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bound,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Fwd<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => self.tape.dropout(x, self.dropout, rng),
            None => Ok(x),
        }
    }

    fn expect_cols(&self, op: &'static str, x: Var, cols: usize) -> Result<()> {
        let shape = self.tape.value(x).shape();
        if self.tape.value(x).cols() != cols {
            return Err(Error::dim(op, &[shape, &[cols]]));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.uniform(format!("{name}.bias"), &[1, d_out], d_in, rng));
        Linear { w, b, d_in, d_out }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let y = f.tape.matmul(x, f.p(self.w))?;
        match self.b {
            Some(b) => f.tape.add(y, f.p(b)),
            None => Ok(y),
        }
    }

    pub fn dense(&self, s: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = dense::matmul(x, s.get(self.w));
        if let Some(b) = self.b {
            dense::add_row(&mut y, s.get(b));
        }
        y
    }
}

/// `(W1 a + b1) * sigmoid(W2 a + b2)`.
#[derive(Clone, Debug)]
pub struct Glu {
    pub value: Linear,
    pub gate: Linear,
}

impl Glu {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Glu {
            value: Linear::new(store, &format!("{name}.value"), d_in, d_out, true, rng),
            gate: Linear::new(store, &format!("{name}.gate"), d_in, d_out, true, rng),
        }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let x = f.drop(x)?;
        let a = self.value.tape(f, x)?;
        let g = self.gate.tape(f, x)?;
        let g = f.tape.sigmoid(g);
        f.tape.mul(a, g)
    }

    pub fn dense(&self, s: &ParamStore, x: &Tensor) -> Tensor {
        let mut a = self.value.dense(s, x);
        let g = self.gate.dense(s, x);
        for (v, g) in a.values_mut().iter_mut().zip(g.values()) {
            *v *= dense::sigmoid(*g);
        }
        a
    }
}

/// `layer_norm(residual + GLU(x))` with a learned gain and bias.
#[derive(Clone, Debug)]
pub struct GateAddNorm {
    pub glu: Glu,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl GateAddNorm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let glu = Glu::new(store, &format!("{name}.glu"), d_in, d_out, rng);
        let gain = store.push(format!("{name}.norm.gain"), Tensor::full(&[1, d_out], 1.0));
        let bias = store.push(format!("{name}.norm.bias"), Tensor::zeros(&[1, d_out]));
        GateAddNorm { glu, gain, bias }
    }

    pub fn d_out(&self) -> usize {
        self.glu.value.d_out
    }

    pub fn tape(&self, f: &mut Fwd, x: Var, residual: Var) -> Result<Var> {
        f.expect_cols("glu_addnorm", x, self.glu.value.d_in)?;
        f.expect_cols("glu_addnorm", residual, self.d_out())?;
        let g = self.glu.tape(f, x)?;
        let (gr, rr) = (f.tape.value(g).rows(), f.tape.value(residual).rows());
        if gr != rr {
            return Err(Error::dim("glu_addnorm", &[f.tape.value(g).shape(), f.tape.value(residual).shape()]));
        }
        let y = f.tape.add(residual, g)?;
        let y = f.tape.layer_norm_lastdim(y);
        let y = f.tape.mul(y, f.p(self.gain))?;
        f.tape.add(y, f.p(self.bias))
    }

    pub fn dense(&self, s: &ParamStore, x: &Tensor, residual: &Tensor) -> Tensor {
        let mut y = self.glu.dense(s, x);
        dense::add(&mut y, residual);
        dense::layer_norm_rows(&mut y);
        let (gain, bias) = (s.get(self.gain).values(), s.get(self.bias).values());
        let c = y.cols();
        for row in y.values_mut().chunks_mut(c) {
            for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
                *v = *v * g + b;
            }
        }
        y
    }
}

/// Gated residual network:
/// `eta1 = elu(W_a x + W_c c + b_a)`, `eta2 = W_b eta1 + b_b`,
/// `out = layer_norm(skip(x) + GLU(eta2))`.
#[derive(Clone, Debug)]
pub struct Grn {
    pub skip: Option<Linear>,
    pub fc_a: Linear,
    pub context: Option<Linear>,
    pub fc_b: Linear,
    pub gate: GateAddNorm,
}

impl Grn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        d_context: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let skip = (d_in != d_out).then(|| Linear::new(store, &format!("{name}.skip"), d_in, d_out, true, rng));
        let fc_a = Linear::new(store, &format!("{name}.fc_a"), d_in, d_hidden, true, rng);
        let context = d_context.map(|dc| Linear::new(store, &format!("{name}.context"), dc, d_hidden, false, rng));
        let fc_b = Linear::new(store, &format!("{name}.fc_b"), d_hidden, d_hidden, true, rng);
        let gate = GateAddNorm::new(store, &format!("{name}.gate"), d_hidden, d_out, rng);
        Grn { skip, fc_a, context, fc_b, gate }
    }

    /// `context` is a `1 x d_context` row broadcast over every input row;
    /// passing `None` is the same as passing zeros.
    pub fn tape(&self, f: &mut Fwd, x: Var, context: Option<Var>) -> Result<Var> {
        f.expect_cols("grn", x, self.fc_a.d_in)?;
        let skip = match &self.skip {
            Some(l) => l.tape(f, x)?,
            None => x,
        };
        let mut h = self.fc_a.tape(f, x)?;
        if let (Some(l), Some(c)) = (&self.context, context) {
            f.expect_cols("grn", c, l.d_in)?;
            let hc = l.tape(f, c)?;
            h = f.tape.add(h, hc)?;
        }
        let h = f.tape.elu(h);
        let h = self.fc_b.tape(f, h)?;
        self.gate.tape(f, h, skip)
    }

    pub fn dense(&self, s: &ParamStore, x: &Tensor, context: Option<&Tensor>) -> Tensor {
        let skip = self.skip.as_ref().map(|l| l.dense(s, x));
        let mut h = self.fc_a.dense(s, x);
        if let (Some(l), Some(c)) = (&self.context, context) {
            dense::add_row(&mut h, &l.dense(s, c));
        }
        dense::map(&mut h, dense::elu);
        let h = self.fc_b.dense(s, &h);
        self.gate.dense(s, &h, skip.as_ref().unwrap_or(x))
    }
}

/// Variable selection: each scalar feature is embedded to `d`, a selection
/// GRN over the concatenated embeddings (and static context) yields softmax
/// weights, and the output is the weighted sum of per-feature GRNs.
#[derive(Clone, Debug)]
pub struct Vsn {
    pub embeds: Vec<Linear>,
    pub select: Grn,
    pub grns: Vec<Grn>,
}

impl Vsn {
    pub fn new(store: &mut ParamStore, name: &str, n_features: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let embeds = (0..n_features)
            .map(|i| Linear::new(store, &format!("{name}.embed{i}"), 1, d, true, rng))
            .collect();
        let select = Grn::new(store, &format!("{name}.select"), n_features * d, d, n_features, Some(d), rng);
        let grns = (0..n_features)
            .map(|i| Grn::new(store, &format!("{name}.feature{i}"), d, d, d, None, rng))
            .collect();
        Vsn { embeds, select, grns }
    }

    /// Returns the `T x d` selected sequence and the `T x F` weights.
    pub fn tape(&self, f: &mut Fwd, u: Var, context: Var) -> Result<(Var, Var)> {
        f.expect_cols("variable_selection", u, self.embeds.len())?;
        let mut embedded = Vec::with_capacity(self.embeds.len());
        for (i, e) in self.embeds.iter().enumerate() {
            let col = f.tape.slice_cols(u, i, 1)?;
            embedded.push(e.tape(f, col)?);
        }
        let flat = f.tape.concat_lastdim(&embedded)?;
        let logits = self.select.tape(f, flat, Some(context))?;
        let weights = f.tape.softmax_lastdim(logits);
        let mut out: Option<Var> = None;
        for (i, (g, e)) in self.grns.iter().zip(&embedded).enumerate() {
            let processed = g.tape(f, *e, None)?;
            let w = f.tape.slice_cols(weights, i, 1)?;
            let term = f.tape.mul(processed, w)?;
            out = Some(match out {
                Some(acc) => f.tape.add(acc, term)?,
                None => term,
            });
        }
        Ok((out.expect("at least one feature"), weights))
    }

    pub fn dense(&self, s: &ParamStore, u: &Tensor, context: &Tensor) -> (Tensor, Tensor) {
        let embedded: Vec<Tensor> =
            self.embeds.iter().enumerate().map(|(i, e)| e.dense(s, &dense::col(u, i))).collect();
        let rows = u.rows();
        let d = self.grns[0].fc_a.d_in;
        let mut flat = Vec::with_capacity(rows * d * embedded.len());
        for r in 0..rows {
            for e in &embedded {
                flat.extend_from_slice(e.row(r));
            }
        }
        let flat = Tensor::new(vec![rows, d * embedded.len()], flat).expect("concat shape");
        let mut weights = self.select.dense(s, &flat, Some(context));
        dense::softmax_rows(&mut weights);
        let mut out = Tensor::zeros(&[rows, d]);
        for (i, (g, e)) in self.grns.iter().zip(&embedded).enumerate() {
            let processed = g.dense(s, e, None);
            let f = weights.cols();
            for r in 0..rows {
                let w = weights.values()[r * f + i];
                for (o, p) in out.values_mut()[r * d..(r + 1) * d].iter_mut().zip(processed.row(r)) {
                    *o += p * w;
                }
            }
        }
        (out, weights)
    }
}

/// Single-layer LSTM, gate order (input, forget, cell, output), zero initial
/// state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Lstm {
            w_ih: store.uniform(format!("{name}.w_ih"), &[d_in, 4 * d], d, rng),
            w_hh: store.uniform(format!("{name}.w_hh"), &[d, 4 * d], d, rng),
            b: store.uniform(format!("{name}.bias"), &[1, 4 * d], d, rng),
            d_in,
            d,
        }
    }

    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        f.expect_cols("lstm", x, self.d_in)?;
        let d = self.d;
        let xw = f.tape.matmul(x, f.p(self.w_ih))?;
        let xw = f.tape.add(xw, f.p(self.b))?;
        let steps = f.tape.value(x).rows();
        let mut hs = Vec::with_capacity(steps);
        let mut state: Option<(Var, Var)> = None;
        for t in 0..steps {
            let mut z = f.tape.slice_rows(xw, t, 1)?;
            if let Some((h, _)) = state {
                let hz = f.tape.matmul(h, f.p(self.w_hh))?;
                z = f.tape.add(z, hz)?;
            }
            let i = f.tape.slice_cols(z, 0, d)?;
            let i = f.tape.sigmoid(i);
            let g = f.tape.slice_cols(z, 2 * d, d)?;
            let g = f.tape.tanh(g);
            let o = f.tape.slice_cols(z, 3 * d, d)?;
            let o = f.tape.sigmoid(o);
            let mut c = f.tape.mul(i, g)?;
            if let Some((_, c_prev)) = state {
                let fg = f.tape.slice_cols(z, d, d)?;
                let fg = f.tape.sigmoid(fg);
                let keep = f.tape.mul(fg, c_prev)?;
                c = f.tape.add(keep, c)?;
            }
            let tc = f.tape.tanh(c);
            let h = f.tape.mul(o, tc)?;
            hs.push(h);
            state = Some((h, c));
        }
        f.tape.concat_rows(&hs)
    }

    /// `x W_ih + b` for every row; position-wise, so it can be computed once
    /// for a whole series.
    pub fn input_projection(&self, s: &ParamStore, x: &Tensor) -> Tensor {
        let mut xw = dense::matmul(x, s.get(self.w_ih));
        dense::add_row(&mut xw, s.get(self.b));
        xw
    }

    /// Runs the recurrence over rows of a precomputed input projection.
    pub fn recur(&self, s: &ParamStore, xw: &[f64]) -> Tensor {
        let d = self.d;
        let steps = xw.len() / (4 * d);
        let w_hh = s.get(self.w_hh).values();
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut out = Vec::with_capacity(steps * d);
        let mut z = vec![0.0; 4 * d];
        for t in 0..steps {
            z.copy_from_slice(&xw[t * 4 * d..(t + 1) * 4 * d]);
            if t > 0 {
                for (k, hk) in h.iter().enumerate() {
                    for (zj, w) in z.iter_mut().zip(&w_hh[k * 4 * d..(k + 1) * 4 * d]) {
                        *zj += hk * w;
                    }
                }
            }
            for j in 0..d {
                let i = dense::sigmoid(z[j]);
                let g = z[2 * d + j].tanh();
                let o = dense::sigmoid(z[3 * d + j]);
                c[j] = if t > 0 { dense::sigmoid(z[d + j]) * c[j] + i * g } else { i * g };
                h[j] = o * c[j].tanh();
            }
            out.extend_from_slice(&h);
        }
        Tensor::new(vec![steps, d], out).expect("lstm output shape")
    }

    pub fn dense(&self, s: &ParamStore, x: &Tensor) -> Tensor {
        self.recur(s, self.input_projection(s, x).values())
    }
}

/// Multi-head causal self-attention with per-head query, key and value
/// projections and an output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: Vec<[ParamId; 3]>,
    pub out: Linear,
    pub d_k: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_k = d / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                ["query", "key", "value"].map(|kind| store.uniform(format!("{name}.head{h}.{kind}"), &[d, d_k], d, rng))
            })
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), d, d, true, rng);
        Attention { heads, out, d_k }
    }

    /// Additive mask: zero on and below the diagonal, `-inf` above.
    pub fn causal_mask(t: usize) -> Tensor {
        let mut m = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in i + 1..t {
                m.values_mut()[i * t + j] = f64::NEG_INFINITY;
            }
        }
        m
    }

    /// Returns the output sequence and one `T x T` weight map per head.
    pub fn tape(&self, f: &mut Fwd, x: Var) -> Result<(Var, Vec<Var>)> {
        f.expect_cols("causal_attention", x, self.out.d_in)?;
        let t = f.tape.value(x).rows();
        let mask = f.tape.constant(Self::causal_mask(t));
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.heads.len());
        for [wq, wk, wv] in &self.heads {
            let q = f.tape.matmul(x, f.p(*wq))?;
            let k = f.tape.matmul(x, f.p(*wk))?;
            let v = f.tape.matmul(x, f.p(*wv))?;
            let kt = f.tape.transpose(k)?;
            let scores = f.tape.matmul(q, kt)?;
            let scores = f.tape.scale(scores, scale);
            let scores = f.tape.add(scores, mask)?;
            let weights = f.tape.softmax_lastdim(scores);
            outs.push(f.tape.matmul(weights, v)?);
            maps.push(weights);
        }
        let cat = f.tape.concat_lastdim(&outs)?;
        Ok((self.out.tape(f, cat)?, maps))
    }

    /// Output row for the last position only.
    pub fn dense_last(&self, s: &ParamStore, x: &Tensor) -> Tensor {
        let t = x.rows();
        let last = dense::rows(x, t - 1, 1);
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut cat = Vec::with_capacity(self.heads.len() * self.d_k);
        for [wq, wk, wv] in &self.heads {
            let q = dense::matmul(&last, s.get(*wq));
            let k = dense::matmul(x, s.get(*wk));
            let v = dense::matmul(x, s.get(*wv));
            let mut scores: Vec<f64> = (0..t)
                .map(|j| q.values().iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                sum += *sc;
            }
            let mut head = vec![0.0; self.d_k];
            for (j, w) in scores.iter().enumerate() {
                for (h, vv) in head.iter_mut().zip(v.row(j)) {
                    *h += w / sum * vv;
                }
            }
            cat.extend(head);
        }
        let cat = Tensor::new(vec![1, cat.len()], cat).expect("head concat");
        self.out.dense(s, &cat)
    }
}
