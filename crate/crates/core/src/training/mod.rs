//! Sharpe-loss training, early stopping on a chronological validation
//! block, and the expanding-window walk-forward driver.
//!
//! Row indices below are feature-frame rows. A position taken at row `t`
//! earns the return realized at row `t + 1`, so a split with `n_train`
//! training rows of which the last `n_val` are validation dates uses
//!
//! * loss rows `0..n_fit - 1` (returns realized before validation starts),
//! * validation rows `n_fit - 1..n_train - 1`,
//!
//! with `n_fit = n_train - n_val`. Nothing realized after the training range
//! reaches either set.

mod adam;
mod loss;

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use loss::{
    captured_returns, captured_returns_tape, daily_vol_target, sharpe_loss, smoothed_sharpe, strategy_returns,
    ANNUALIZATION, SHARPE_EPS,
};

use crate::backtest_metrics::momentum_position;
use crate::error::{Error, Result};
use crate::features::FeatureFrame;
use crate::market_data::{validation_len, WalkForwardSplit};
use crate::momentum_model::{Architecture, Checkpoint, Model, ModelInput, TftConfig};
use crate::tensor::{Tape, Tensor};

/// Strategy variants. The first three are trained; the last two are fixed
/// rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tft,
    TftCpd,
    LstmCpd,
    LongOnly,
    Momentum,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] =
        [ModelKind::Tft, ModelKind::TftCpd, ModelKind::LstmCpd, ModelKind::LongOnly, ModelKind::Momentum];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tft => "tft",
            ModelKind::TftCpd => "tft_cpd",
            ModelKind::LstmCpd => "lstm_cpd",
            ModelKind::LongOnly => "long_only",
            ModelKind::Momentum => "momentum",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }

    pub fn is_trained(self) -> bool {
        self.architecture().is_some()
    }

    pub fn architecture(self) -> Option<Architecture> {
        match self {
            ModelKind::Tft | ModelKind::TftCpd => Some(Architecture::Tft),
            ModelKind::LstmCpd => Some(Architecture::LstmDmn),
            ModelKind::LongOnly | ModelKind::Momentum => None,
        }
    }

    pub fn uses_cpd(self) -> bool {
        matches!(self, ModelKind::TftCpd | ModelKind::LstmCpd)
    }

    /// `base` with the input width and feature flag this kind needs.
    pub fn model_config(self, base: &TftConfig) -> TftConfig {
        let use_cpd = self.uses_cpd();
        TftConfig {
            use_cpd_features: use_cpd,
            n_features: if use_cpd { crate::features::CPD_FEATURES } else { crate::features::BASE_FEATURES },
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Annualized volatility target of each asset's captured return.
    pub vol_target: f64,
    pub seed: u64,
    /// Cost per unit turnover, in basis points.
    pub transaction_cost_bp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 10,
            vol_target: 0.15,
            seed: 42,
            transaction_cost_bp: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.vol_target > 0.0 && self.vol_target.is_finite()) {
            return fail("vol_target must be positive");
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be at least 1");
        }
        if !(self.transaction_cost_bp >= 0.0 && self.transaction_cost_bp.is_finite()) {
            return fail("transaction_cost_bp must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation Sharpe after each epoch.
    pub validation_sharpe: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Rows whose realized returns enter the loss.
    pub loss_rows: Range<usize>,
    /// Rows scored for validation.
    pub validation_rows: Range<usize>,
    /// First and last training dates held out for validation.
    pub validation_dates: (NaiveDate, NaiveDate),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub train_config: TrainConfig,
    pub diagnostics: TrainDiagnostics,
}

impl TrainedModel {
    pub fn model(&self) -> Result<Model> {
        Model::from_checkpoint(&self.checkpoint)
    }
}

/// Row bookkeeping for one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRows {
    pub n_train: usize,
    pub n_val: usize,
    pub loss: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRows {
    pub fn new(frame: &FeatureFrame, split: &WalkForwardSplit) -> Result<SplitRows> {
        let n_train = frame.dates.partition_point(|d| *d <= split.train_end);
        if n_train < 3 {
            return Err(Error::Range(format!("{n_train} feature rows up to {}", split.train_end)));
        }
        let n_val = validation_len(n_train, split.validation_fraction);
        let n_fit = n_train - n_val;
        let test_start = frame.dates.partition_point(|d| *d < split.test_start);
        let test_end = frame.dates.partition_point(|d| *d <= split.test_end);
        Ok(SplitRows {
            n_train,
            n_val,
            loss: 0..n_fit - 1,
            validation: n_fit - 1..n_train - 1,
            test: test_start..test_end,
        })
    }
}

fn check_frame(model: &Model, frame: &FeatureFrame) -> Result<()> {
    if model.config().use_cpd_features && !frame.has_cpd {
        return Err(Error::MissingFeature("model expects changepoint features; frame has none".into()));
    }
    if frame.assets.is_empty() {
        return Err(Error::Range("feature frame has no assets".into()));
    }
    Ok(())
}

fn window_input(model: &Model, frame: &FeatureFrame, asset: usize, start: usize) -> Result<ModelInput> {
    let c = model.config();
    let values = frame.window_inputs(asset, start, start + c.window - 1, c.use_cpd_features);
    Ok(ModelInput {
        features: Tensor::new(vec![c.window, c.n_features], values)?,
        sector: frame.assets[asset].meta.sector.index(),
    })
}

fn realized(frame: &FeatureFrame, asset: usize, rows: Range<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = &frame.assets[asset];
    let mut r = Vec::with_capacity(rows.len());
    let mut s = Vec::with_capacity(rows.len());
    for t in rows {
        let row = &a.rows[t];
        r.push(row.next_return.ok_or_else(|| {
            Error::Range(format!("{} has no next return after {}", a.meta.asset_id, frame.dates[t]))
        })?);
        s.push(row.ewma_vol);
    }
    Ok((r, s))
}

/// Model positions for `rows` of one asset from non-overlapping trailing
/// windows: each window of `T` rows contributes all of its outputs. Rows
/// before `T - 1` are read from the first window.
pub fn chunked_positions(model: &Model, frame: &FeatureFrame, asset: usize, rows: Range<usize>) -> Result<Vec<f64>> {
    check_frame(model, frame)?;
    let t = model.config().window;
    if frame.n_rows() < t || rows.end > frame.n_rows() {
        return Err(Error::Range(format!("rows {rows:?} need a {t}-row window inside {} rows", frame.n_rows())));
    }
    let mut out = vec![0.0; rows.len()];
    let mut hi = rows.end;
    while hi > rows.start {
        let start = hi.saturating_sub(t);
        let x = model.positions(&window_input(model, frame, asset, start)?, None)?.x;
        let lo = rows.start.max(hi.saturating_sub(t));
        for row in lo..hi {
            out[row - rows.start] = x[row - start];
        }
        hi = lo;
    }
    Ok(out)
}

/// Smoothed Sharpe of the equal-weight portfolio over `rows`, using the
/// model's positions. The first row pays no turnover cost.
pub fn evaluate_sharpe(model: &Model, frame: &FeatureFrame, rows: Range<usize>, tc: &TrainConfig) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Range(format!("need at least two rows to score, got {rows:?}")));
    }
    let mut portfolio = vec![0.0; rows.len()];
    for asset in 0..frame.assets.len() {
        let x = chunked_positions(model, frame, asset, rows.clone())?;
        let (r, s) = realized(frame, asset, rows.clone())?;
        let z = captured_returns(&x, &r, &s, tc.vol_target, tc.transaction_cost_bp, x[0])?;
        for (p, z) in portfolio.iter_mut().zip(z) {
            *p += z;
        }
    }
    let k = frame.assets.len() as f64;
    let portfolio: Vec<f64> = portfolio.into_iter().map(|p| p / k).collect();
    Ok(smoothed_sharpe(&portfolio))
}

/// Random window starts for one epoch: `ceil(n_loss / T)` per asset, each
/// uniform over the admissible range, then shuffled.
fn epoch_windows(n_assets: usize, n_loss: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let per_asset = n_loss.div_ceil(t);
    let mut windows: Vec<(usize, usize)> = (0..n_assets)
        .flat_map(|a| (0..per_asset).map(move |_| a))
        .map(|a| (a, rng.gen_range(0..=n_loss - t)))
        .collect();
    windows.shuffle(rng);
    windows
}

/// One optimizer step on a batch of `(asset, start)` windows; returns the
/// pooled Sharpe loss.
fn train_step(
    model: &mut Model,
    frame: &FeatureFrame,
    batch: &[(usize, usize)],
    tc: &TrainConfig,
    state: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = model.config().window;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut captured = Vec::with_capacity(batch.len());
    for &(asset, start) in batch {
        let input = window_input(model, frame, asset, start)?;
        let out = model.forward(&mut tape, &bound, &input, Some(&mut *rng))?;
        let (r, s) = realized(frame, asset, start..start + t)?;
        captured.push(captured_returns_tape(&mut tape, out.positions, &r, &s, tc.vol_target, tc.transaction_cost_bp)?);
    }
    let pooled = tape.concat_rows(&captured)?;
    let loss = sharpe_loss(&mut tape, pooled)?;
    let value = tape.value(loss).values()[0];
    if !value.is_finite() {
        return Err(Error::Numeric { block: "sharpe_loss".into() });
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .vars()
        .iter()
        .map(|v| grads.take(*v).expect("parameters are differentiable leaves"))
        .collect();
    adam_step(model.params_mut(), &grads, state, tc.learning_rate)?;
    Ok(value)
}

/// Trains a fresh model on one split and returns the validation-best
/// checkpoint.
pub fn train(
    frame: &FeatureFrame,
    split: &WalkForwardSplit,
    architecture: Architecture,
    config: &TftConfig,
    tc: &TrainConfig,
) -> Result<TrainedModel> {
    tc.validate()?;
    let mut model = Model::new(architecture, config)?;
    check_frame(&model, frame)?;
    let rows = SplitRows::new(frame, split)?;
    let t = config.window;
    if rows.loss.len() < t {
        return Err(Error::Range(format!(
            "{} loss rows before validation, need at least the window length {t}",
            rows.loss.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = AdamState::new(model.params());
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut validation_sharpe = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=tc.max_epochs {
        let windows = epoch_windows(frame.assets.len(), rows.loss.len(), t, &mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in windows.chunks(tc.batch_size) {
            let l = train_step(&mut model, frame, batch, tc, &mut state, &mut rng)?;
            step_losses.push(l);
            total += l;
            steps += 1;
        }
        epoch_losses.push(total / steps as f64);
        let v = evaluate_sharpe(&model, frame, rows.validation.clone(), tc)?;
        validation_sharpe.push(v);
        log::debug!("epoch {epoch}: loss {:.4}, validation sharpe {v:.4}", total / steps as f64);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => v > *b,
        };
        if improved {
            best = Some((v, epoch, model.to_checkpoint()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.early_stop_patience {
                stopped_early = epoch < tc.max_epochs;
                break;
            }
        }
    }

    let (_, best_epoch, checkpoint) = best.expect("at least one epoch runs");
    Ok(TrainedModel {
        checkpoint,
        train_config: tc.clone(),
        diagnostics: TrainDiagnostics {
            step_losses,
            epoch_losses,
            validation_sharpe,
            best_epoch,
            stopped_early,
            validation_dates: (frame.dates[rows.n_train - rows.n_val], frame.dates[rows.n_train - 1]),
            loss_rows: rows.loss,
            validation_rows: rows.validation,
        },
    })
}

/// Position at each row of `rows`, each computed from the trailing window
/// ending at that row only.
pub fn sliding_positions(model: &Model, frame: &FeatureFrame, asset: usize, rows: Range<usize>) -> Result<Vec<f64>> {
    check_frame(model, frame)?;
    let c = model.config();
    if rows.start + 1 < c.window || rows.end > frame.n_rows() {
        return Err(Error::Range(format!(
            "rows {rows:?} need {} rows of history inside {} rows",
            c.window,
            frame.n_rows()
        )));
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let values = frame.window_inputs(asset, 0, rows.end - 1, c.use_cpd_features);
    let series = Tensor::new(vec![rows.end, c.n_features], values)?;
    let predictor = model.predictor(&series, frame.assets[asset].meta.sector.index())?;
    rows.map(|t| predictor.position_at(t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionRecord {
    pub asset_id: String,
    pub date: NaiveDate,
    pub position: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub split: WalkForwardSplit,
    /// `None` for rule-based kinds.
    pub trained: Option<TrainedModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkForwardOutput {
    pub kind: ModelKind,
    pub splits: Vec<SplitResult>,
    /// Ordered by split, then asset, then date.
    pub positions: Vec<PositionRecord>,
}

/// Test-year positions for one split from a trained model, or from the rule
/// for fixed kinds.
pub fn test_positions(
    frame: &FeatureFrame,
    rows: Range<usize>,
    kind: ModelKind,
    model: Option<&Model>,
) -> Result<Vec<PositionRecord>> {
    let per_asset: Vec<Vec<f64>> = match (kind, model) {
        (ModelKind::LongOnly, _) => frame.assets.iter().map(|_| vec![1.0; rows.len()]).collect(),
        (ModelKind::Momentum, _) => frame
            .assets
            .iter()
            .map(|a| a.rows[rows.clone()].iter().map(|r| momentum_position(&r.macd)).collect())
            .collect(),
        (_, Some(m)) => (0..frame.assets.len())
            .into_par_iter()
            .map(|a| sliding_positions(m, frame, a, rows.clone()))
            .collect::<Result<_>>()?,
        (_, None) => return Err(Error::Contract(format!("{} needs a trained model", kind.as_str()))),
    };
    Ok(frame
        .assets
        .iter()
        .zip(per_asset)
        .flat_map(|(a, xs)| {
            rows.clone().zip(xs).map(move |(t, position)| PositionRecord {
                asset_id: a.meta.asset_id.clone(),
                date: frame.dates[t],
                position,
            })
        })
        .collect())
}

/// Trains on each expanding split in turn and slides over its test year.
pub fn walk_forward(
    frame: &FeatureFrame,
    splits: &[WalkForwardSplit],
    kind: ModelKind,
    config: &TftConfig,
    tc: &TrainConfig,
) -> Result<WalkForwardOutput> {
    let config = kind.model_config(config);
    let mut results = Vec::with_capacity(splits.len());
    let mut positions = Vec::new();
    for split in splits {
        let rows = SplitRows::new(frame, split)?;
        if rows.test.is_empty() {
            return Err(Error::Range(format!("no feature rows in test year {}", split.test_year)));
        }
        let trained = match kind.architecture() {
            Some(arch) => Some(train(frame, split, arch, &config, tc)?),
            None => None,
        };
        let model = trained.as_ref().map(TrainedModel::model).transpose()?;
        log::info!("{} split {}: {} test rows", kind.as_str(), split.test_year, rows.test.len());
        positions.extend(test_positions(frame, rows.test.clone(), kind, model.as_ref())?);
        results.push(SplitResult { split: split.clone(), trained });
    }
    Ok(WalkForwardOutput { kind, splits: results, positions })
}

pub const POSITION_HEADER: [&str; 3] = ["asset_id", "date", "position"];

pub fn write_positions_csv<W: Write>(records: &[PositionRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POSITION_HEADER)?;
    for r in records {
        w.write_record([r.asset_id.clone(), r.date.to_string(), r.position.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_positions_csv<R: Read>(reader: R) -> Result<Vec<PositionRecord>> {
    let mut rd = csv::Reader::from_reader(reader);
    if rd.headers()?.iter().ne(POSITION_HEADER) {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", POSITION_HEADER.join(",")) });
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn save_positions_csv(records: &[PositionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_positions_csv(records, std::fs::File::create(path)?)
}

pub fn load_positions_csv(path: impl AsRef<Path>) -> Result<Vec<PositionRecord>> {
    read_positions_csv(std::fs::File::open(path)?)
}
