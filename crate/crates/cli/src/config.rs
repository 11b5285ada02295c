//! Run configuration. The file is TOML; every key below is addressed by its
//! dotted name (`train.learning_rate`, `walk_forward.first_test_year`, ...)
//! and unknown keys are rejected.

use std::path::{Path, PathBuf};

use momentum_transformer::changepoint::{DEFAULT_LOOKBACK, MIN_LOOKBACK};
use momentum_transformer::momentum_model::TftConfig;
use momentum_transformer::training::{ModelKind, TrainConfig};
use momentum_transformer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub walk_forward: WalkForward,
    pub cpd: Cpd,
    pub model: ModelSection,
    pub train: TrainSection,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Close-price CSV.
    pub prices: Option<PathBuf>,
    /// `"compute"` or a directory of per-asset changepoint CSVs.
    pub cpd: String,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkForward {
    pub first_test_year: i32,
    pub last_test_year: i32,
    pub validation_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Cpd {
    pub lookback: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_hidden: usize,
    pub dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub vol_target: f64,
    pub transaction_cost_bp: f64,
}

/// One strategy column of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub kind: ModelKind,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_window() -> usize {
    252
}

fn default_heads() -> usize {
    4
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            walk_forward: WalkForward::default(),
            cpd: Cpd::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            variants: vec![
                Variant { kind: ModelKind::LongOnly, window: 252, heads: 4 },
                Variant { kind: ModelKind::Momentum, window: 252, heads: 4 },
                Variant { kind: ModelKind::Tft, window: 252, heads: 4 },
            ],
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths { prices: None, cpd: "compute".into(), out_dir: PathBuf::from("out") }
    }
}

impl Default for WalkForward {
    fn default() -> Self {
        WalkForward { first_test_year: 2020, last_test_year: 2023, validation_fraction: 0.2 }
    }
}

impl Default for Cpd {
    fn default() -> Self {
        Cpd { lookback: DEFAULT_LOOKBACK }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = TftConfig::default();
        ModelSection { d_hidden: base.d_hidden, dropout_rate: base.dropout_rate }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            max_epochs: base.max_epochs,
            early_stop_patience: base.early_stop_patience,
            vol_target: base.vol_target,
            transaction_cost_bp: base.transaction_cost_bp,
        }
    }
}

impl Variant {
    /// File and report label, e.g. `tft_252_4`; rule-based kinds use the
    /// bare kind name.
    pub fn label(&self) -> String {
        if self.kind.is_trained() {
            format!("{}_{}_{}", self.kind.as_str(), self.window, self.heads)
        } else {
            self.kind.as_str().to_string()
        }
    }

    /// Hidden width: `model.d_hidden` rounded up to a multiple of the head
    /// count.
    pub fn d_hidden(&self, requested: usize) -> usize {
        requested.div_ceil(self.heads) * self.heads
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.paths.prices = cfg.paths.prices.as_deref().map(resolve);
        cfg.paths.out_dir = resolve(&cfg.paths.out_dir);
        if cfg.paths.cpd != "compute" {
            cfg.paths.cpd = resolve(Path::new(&cfg.paths.cpd)).display().to_string();
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            vol_target: t.vol_target,
            seed: self.seed,
            transaction_cost_bp: t.transaction_cost_bp,
        }
    }

    pub fn model_config(&self, v: &Variant) -> TftConfig {
        v.kind.model_config(&TftConfig {
            window: v.window,
            n_heads: v.heads,
            d_hidden: v.d_hidden(self.model.d_hidden),
            dropout_rate: self.model.dropout_rate,
            seed: self.seed,
            ..TftConfig::default()
        })
    }

    pub fn needs_cpd(&self) -> bool {
        self.variants.iter().any(|v| v.kind.uses_cpd())
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("variants: at least one variant is required".into()));
        }
        let mut labels: Vec<String> = self.variants.iter().map(Variant::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("variants: duplicate variant".into()));
        }
        for v in &self.variants {
            if v.heads == 0 {
                return Err(Error::Config(format!("variants: {} has zero heads", v.kind.as_str())));
            }
            self.model_config(v).validate()?;
        }
        self.train_config().validate()?;
        if self.cpd.lookback < MIN_LOOKBACK {
            return Err(Error::Config(format!("cpd.lookback must be at least {MIN_LOOKBACK}")));
        }
        let wf = &self.walk_forward;
        if wf.last_test_year < wf.first_test_year {
            return Err(Error::Config("walk_forward.last_test_year precedes first_test_year".into()));
        }
        if !(wf.validation_fraction > 0.0 && wf.validation_fraction < 1.0) {
            return Err(Error::Config("walk_forward.validation_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn test_years(&self) -> Vec<i32> {
        (self.walk_forward.first_test_year..=self.walk_forward.last_test_year).collect()
    }
}
