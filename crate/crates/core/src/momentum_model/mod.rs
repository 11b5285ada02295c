//! Position models: a decoder-only temporal fusion transformer and a plain
//! LSTM baseline.
//!
//! Both map a `T x F` window of features plus a sector index to `T`
//! positions in `(-1, 1)`. Position `t` depends only on rows `0..=t`.
//!
//! The transformer pipeline is: static sector embedding and two context
//! vectors, variable selection per time step, an LSTM, gated skip from the
//! selected inputs, static enrichment, causal multi-head attention, gated
//! skip from the enriched sequence, a position-wise GRN, gated skip from the
//! LSTM stage, and a dense `tanh` head.
//!
//! ```
//! use momentum_transformer::momentum_model::{Architecture, Model, ModelInput, TftConfig};
//! use momentum_transformer::tensor::Tensor;
//!
//! let config = TftConfig { window: 10, n_heads: 2, d_hidden: 8, n_features: 3, ..TftConfig::default() };
//! let model = Model::new(Architecture::Tft, &config).unwrap();
//! let input = ModelInput { features: Tensor::full(&[10, 3], 0.1), sector: 4 };
//! let out = model.positions(&input, None).unwrap();
//! assert_eq!(out.x.len(), 10);
//! assert!(out.x.iter().all(|x| x.abs() < 1.0));
//! ```

mod dense;
mod layers;
mod params;

pub use layers::{Attention, Fwd, GateAddNorm, Glu, Grn, Linear, Lstm, Vsn};
pub use params::{Bound, ParamId, ParamStore};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Pre-activation bound on the output head; keeps `tanh` strictly inside
/// `(-1, 1)` in floating point.
pub const OUTPUT_CLAMP: f64 = 18.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Tft,
    LstmDmn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TftConfig {
    pub window: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub n_features: usize,
    pub static_vocab_size: usize,
    pub dropout_rate: f64,
    pub use_cpd_features: bool,
    pub seed: u64,
}

impl Default for TftConfig {
    fn default() -> Self {
        TftConfig {
            window: 252,
            n_heads: 4,
            d_hidden: 32,
            n_features: crate::features::BASE_FEATURES,
            static_vocab_size: crate::market_data::SectorGroup::ALL.len(),
            dropout_rate: 0.1,
            use_cpd_features: false,
            seed: 42,
        }
    }
}

impl TftConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.window < 2 {
            return fail(format!("model.window must be >= 2, got {}", self.window));
        }
        if self.n_features == 0 || self.static_vocab_size == 0 || self.d_hidden == 0 || self.n_heads == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.d_hidden % self.n_heads != 0 {
            return fail(format!("model.d_hidden {} is not divisible by n_heads {}", self.d_hidden, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("model.dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `T x F` feature window.
    pub features: Tensor,
    pub sector: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionOutput {
    pub x: Vec<f64>,
    /// `T x F` selection weights (transformer only).
    pub vsn_weights: Option<Tensor>,
    /// One `T x T` map per head (transformer only).
    pub attention: Vec<Tensor>,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `T x 1` positions.
    pub positions: Var,
    pub vsn_weights: Option<Var>,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
struct TftNet {
    static_embedding: ParamId,
    context_select: Grn,
    context_enrich: Grn,
    vsn: Vsn,
    lstm: Lstm,
    post_lstm: GateAddNorm,
    enrich: Grn,
    attention: Attention,
    post_attention: GateAddNorm,
    feed_forward: Grn,
    output_gate: GateAddNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
struct LstmNet {
    lstm: Lstm,
    head: Linear,
}

#[derive(Clone, Debug)]
enum Net {
    Tft(Box<TftNet>),
    Lstm(LstmNet),
}

#[derive(Clone, Debug)]
pub struct Model {
    architecture: Architecture,
    config: TftConfig,
    store: ParamStore,
    net: Net,
}

/// Closed-form number of learnable scalars.
pub fn param_count(architecture: Architecture, c: &TftConfig) -> usize {
    let (d, f, v) = (c.d_hidden, c.n_features, c.static_vocab_size);
    let lstm = |d_in: usize| 4 * d * d_in + 4 * d * d + 4 * d;
    match architecture {
        Architecture::LstmDmn => lstm(f) + d + 1,
        Architecture::Tft => {
            let grn_dd = 4 * d * d + 6 * d;
            let grn_dd_ctx = grn_dd + d * d;
            let gate_dd = 2 * d * d + 4 * d;
            // Selection GRN: F*d -> d hidden -> F, with context and skip projection.
            let select = (f * d * d + d) + d * d + (d * d + d) + 2 * (d * f + f) + 2 * f + (f * d * f + f);
            v * d
                + 2 * grn_dd
                + f * 2 * d
                + select
                + f * grn_dd
                + lstm(d)
                + gate_dd
                + grn_dd_ctx
                + (3 * d * d + d * d + d)
                + gate_dd
                + grn_dd
                + gate_dd
                + (d + 1)
        }
    }
}

fn check(tape: &Tape, v: Var, block: &str) -> Result<Var> {
    if tape.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric { block: block.to_string() })
    }
}

fn check_dense(t: Tensor, block: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric { block: block.to_string() })
    }
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(architecture: Architecture, config: &TftConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (d, f) = (config.d_hidden, config.n_features);
        let net = match architecture {
            Architecture::Tft => {
                let static_embedding =
                    s.uniform("static_embedding".into(), &[config.static_vocab_size, d], d, &mut rng);
                let context_select = Grn::new(&mut s, "context_select", d, d, d, None, &mut rng);
                let context_enrich = Grn::new(&mut s, "context_enrich", d, d, d, None, &mut rng);
                let vsn = Vsn::new(&mut s, "vsn", f, d, &mut rng);
                let lstm = Lstm::new(&mut s, "lstm", d, d, &mut rng);
                let post_lstm = GateAddNorm::new(&mut s, "post_lstm", d, d, &mut rng);
                let enrich = Grn::new(&mut s, "enrich", d, d, d, Some(d), &mut rng);
                let attention = Attention::new(&mut s, "attention", d, config.n_heads, &mut rng);
                let post_attention = GateAddNorm::new(&mut s, "post_attention", d, d, &mut rng);
                let feed_forward = Grn::new(&mut s, "feed_forward", d, d, d, None, &mut rng);
                let output_gate = GateAddNorm::new(&mut s, "output_gate", d, d, &mut rng);
                let head = Linear::new(&mut s, "head", d, 1, true, &mut rng);
                Net::Tft(Box::new(TftNet {
                    static_embedding,
                    context_select,
                    context_enrich,
                    vsn,
                    lstm,
                    post_lstm,
                    enrich,
                    attention,
                    post_attention,
                    feed_forward,
                    output_gate,
                    head,
                }))
            }
            Architecture::LstmDmn => {
                let lstm = Lstm::new(&mut s, "lstm", f, d, &mut rng);
                let head = Linear::new(&mut s, "head", d, 1, true, &mut rng);
                Net::Lstm(LstmNet { lstm, head })
            }
        };
        Ok(Model { architecture, config: config.clone(), store: s, net })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn config(&self) -> &TftConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn validate_input(&self, input: &ModelInput) -> Result<()> {
        let (t, f) = input.features.dims2();
        if input.features.shape().len() != 2 || f != self.config.n_features || t == 0 {
            return Err(Error::dim("model_input", &[input.features.shape(), &[self.config.window, self.config.n_features]]));
        }
        if input.sector >= self.config.static_vocab_size {
            return Err(Error::Contract(format!(
                "sector index {} outside vocabulary of {}",
                input.sector, self.config.static_vocab_size
            )));
        }
        if !input.features.is_finite() {
            return Err(Error::Numeric { block: "model_input".into() });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Dropout is active only when a
    /// generator is supplied (training mode).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        input: &ModelInput,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardVars> {
        self.validate_input(input)?;
        let u = tape.constant(input.features.clone());
        let dropout = self.config.dropout_rate;
        let mut f = Fwd { tape, params, dropout, rng: train_rng };
        match &self.net {
            Net::Lstm(n) => {
                let h = n.lstm.tape(&mut f, u)?;
                let h = check(f.tape, h, "lstm")?;
                let y = n.head.tape(&mut f, h)?;
                let y = f.tape.clamp(y, -OUTPUT_CLAMP, OUTPUT_CLAMP);
                let x = f.tape.tanh(y);
                Ok(ForwardVars { positions: check(f.tape, x, "head")?, vsn_weights: None, attention: vec![] })
            }
            Net::Tft(n) => {
                let table = f.params.var(n.static_embedding);
                let s = f.tape.embedding_lookup(table, input.sector)?;
                let c_select = n.context_select.tape(&mut f, s, None)?;
                let c_enrich = n.context_enrich.tape(&mut f, s, None)?;
                check(f.tape, c_select, "static_context")?;
                check(f.tape, c_enrich, "static_context")?;
                let (selected, weights) = n.vsn.tape(&mut f, u, c_select)?;
                check(f.tape, selected, "variable_selection")?;
                let h = n.lstm.tape(&mut f, selected)?;
                let h = check(f.tape, h, "lstm")?;
                let phi = n.post_lstm.tape(&mut f, h, selected)?;
                let phi = check(f.tape, phi, "post_lstm_gate")?;
                let theta = n.enrich.tape(&mut f, phi, Some(c_enrich))?;
                let theta = check(f.tape, theta, "static_enrichment")?;
                let (attn, maps) = n.attention.tape(&mut f, theta)?;
                check(f.tape, attn, "causal_attention")?;
                let delta = n.post_attention.tape(&mut f, attn, theta)?;
                let delta = check(f.tape, delta, "post_attention_gate")?;
                let psi = n.feed_forward.tape(&mut f, delta, None)?;
                let psi = check(f.tape, psi, "feed_forward")?;
                let out = n.output_gate.tape(&mut f, psi, phi)?;
                let out = check(f.tape, out, "output_gate")?;
                let y = n.head.tape(&mut f, out)?;
                let y = f.tape.clamp(y, -OUTPUT_CLAMP, OUTPUT_CLAMP);
                let x = f.tape.tanh(y);
                Ok(ForwardVars { positions: check(f.tape, x, "head")?, vsn_weights: Some(weights), attention: maps })
            }
        }
    }

    /// Convenience forward on a fresh tape.
    pub fn positions(&self, input: &ModelInput, train_rng: Option<&mut ChaCha8Rng>) -> Result<PositionOutput> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, input, train_rng)?;
        Ok(PositionOutput {
            x: tape.value(out.positions).values().to_vec(),
            vsn_weights: out.vsn_weights.map(|w| tape.value(w).clone()),
            attention: out.attention.iter().map(|a| tape.value(*a).clone()).collect(),
        })
    }

    /// Inference helper over a long `N x F` series: position-wise stages
    /// are computed once, then [`Predictor::position_at`] evaluates the
    /// trailing window ending at any row.
    pub fn predictor(&self, features: &Tensor, sector: usize) -> Result<Predictor<'_>> {
        self.validate_input(&ModelInput { features: features.clone(), sector })?;
        let s = &self.store;
        match &self.net {
            Net::Lstm(n) => Ok(Predictor {
                model: self,
                selected: None,
                projection: n.lstm.input_projection(s, features),
                context_enrich: None,
            }),
            Net::Tft(n) => {
                let emb = dense::rows(s.get(n.static_embedding), sector, 1);
                let c_select = check_dense(n.context_select.dense(s, &emb, None), "static_context")?;
                let c_enrich = check_dense(n.context_enrich.dense(s, &emb, None), "static_context")?;
                let (selected, _) = n.vsn.dense(s, features, &c_select);
                let selected = check_dense(selected, "variable_selection")?;
                Ok(Predictor {
                    model: self,
                    projection: n.lstm.input_projection(s, &selected),
                    selected: Some(selected),
                    context_enrich: Some(c_enrich),
                })
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: self.architecture,
            config: self.config.clone(),
            params: self
                .store
                .names()
                .iter()
                .zip(self.store.tensors())
                .map(|(name, t)| NamedTensor { name: name.clone(), shape: t.shape().to_vec(), values: t.values().to_vec() })
                .collect(),
        }
    }

    /// Rebuilds the model described by `ckpt` and copies its parameters,
    /// checking every name and shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", ckpt.format, ckpt.version)));
        }
        let mut model = Model::new(ckpt.architecture, &ckpt.config)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                ckpt.params.len()
            )));
        }
        let names = model.store.names().to_vec();
        for ((name, slot), saved) in names.iter().zip(model.store.tensors_mut()).zip(&ckpt.params) {
            if *name != saved.name || slot.shape() != saved.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    saved.name,
                    saved.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(saved.shape.clone(), saved.values.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        if !model.store.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Model::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "momentum-transformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub config: TftConfig,
    pub params: Vec<NamedTensor>,
}

/// Cached position-wise stages for one asset's series.
pub struct Predictor<'a> {
    model: &'a Model,
    selected: Option<Tensor>,
    projection: Tensor,
    context_enrich: Option<Tensor>,
}

impl Predictor<'_> {
    pub fn len(&self) -> usize {
        self.projection.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Last-step position of the window of `config.window` rows ending at
    /// row `end`.
    pub fn position_at(&self, end: usize) -> Result<f64> {
        let t = self.model.config.window;
        if end >= self.len() || end + 1 < t {
            return Err(Error::Range(format!("window of {t} rows ending at {end} outside series of {}", self.len())));
        }
        let start = end + 1 - t;
        let s = &self.model.store;
        let w4 = self.projection.cols();
        let proj = &self.projection.values()[start * w4..(end + 1) * w4];
        let y = match &self.model.net {
            Net::Lstm(n) => {
                let h = check_dense(n.lstm.recur(s, proj), "lstm")?;
                n.head.dense(s, &dense::rows(&h, t - 1, 1))
            }
            Net::Tft(n) => {
                let selected = dense::rows(self.selected.as_ref().expect("transformer cache"), start, t);
                let h = check_dense(n.lstm.recur(s, proj), "lstm")?;
                let phi = check_dense(n.post_lstm.dense(s, &h, &selected), "post_lstm_gate")?;
                let theta = check_dense(n.enrich.dense(s, &phi, self.context_enrich.as_ref()), "static_enrichment")?;
                let attn = check_dense(n.attention.dense_last(s, &theta), "causal_attention")?;
                let delta = n.post_attention.dense(s, &attn, &dense::rows(&theta, t - 1, 1));
                let delta = check_dense(delta, "post_attention_gate")?;
                let psi = check_dense(n.feed_forward.dense(s, &delta, None), "feed_forward")?;
                let out = n.output_gate.dense(s, &psi, &dense::rows(&phi, t - 1, 1));
                n.head.dense(s, &check_dense(out, "output_gate")?)
            }
        };
        let x = y.values()[0].clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP).tanh();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Numeric { block: "head".into() })
        }
    }
}
