//! Pipeline stages behind the `momentum` binary. Each stage reads the
//! previous stage's artifacts from the output directory:
//!
//! | stage      | writes                                                        |
//! |------------|---------------------------------------------------------------|
//! | `ingest`   | `panel.csv`                                                   |
//! | `cpd`      | `cpd_<lookback>/cpd_<asset>.csv`                              |
//! | `features` | `features.csv`, `features_cpd.csv` when a variant needs it    |
//! | `train`    | `positions_<label>.csv`, `checkpoints/<label>/<year>.json`, `training_<label>.json` |
//! | `backtest` | `strategy_returns.csv`                                        |
//! | `report`   | `report.csv`, `report.md`, `cumulative_returns.csv`           |

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use momentum_transformer::backtest_metrics::{
    build_report, write_cumulative_csv, write_report_csv, Report, StrategyPositions,
};
use momentum_transformer::changepoint::{load_cpd_dir, run_cpd, save_cpd_dir, to_cpd_table, CpdConfig};
use momentum_transformer::features::{build_features, load_feature_csv, save_feature_csv, FeatureFrame};
use momentum_transformer::market_data::{load_price_csv, pit_guard, write_price_csv, PricePanel};
use momentum_transformer::market_data::make_walk_forward;
use momentum_transformer::training::{load_positions_csv, save_positions_csv, walk_forward, TrainDiagnostics};
use momentum_transformer::{Error, Result};

pub use config::{RunConfig, Variant};

pub const PANEL_FILE: &str = "panel.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const FEATURES_CPD_FILE: &str = "features_cpd.csv";
pub const STRATEGY_RETURNS_FILE: &str = "strategy_returns.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_MD_FILE: &str = "report.md";
pub const CUMULATIVE_FILE: &str = "cumulative_returns.csv";

fn out(cfg: &RunConfig, name: impl AsRef<Path>) -> PathBuf {
    cfg.paths.out_dir.join(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFeature(format!("{} not found; run `momentum {stage}` first", path.display())))
    }
}

pub fn positions_file(v: &Variant) -> String {
    format!("positions_{}.csv", v.label())
}

pub fn cpd_dir(cfg: &RunConfig) -> PathBuf {
    if cfg.paths.cpd == "compute" {
        out(cfg, format!("cpd_{}", cfg.cpd.lookback))
    } else {
        PathBuf::from(&cfg.paths.cpd)
    }
}

/// Summary printed by `ingest`.
pub struct IngestSummary {
    pub assets: usize,
    pub dates: usize,
    pub first: String,
    pub last: String,
    pub excluded: Vec<String>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let prices = cfg.paths.prices.as_ref().ok_or_else(|| Error::Config("paths.prices is not set".into()))?;
    let bars = load_price_csv(prices)?;
    let (panel, excluded) = pit_guard(&bars)?;
    for e in &excluded {
        log::warn!("excluded {e}");
    }
    let mut w = create(&out(cfg, PANEL_FILE))?;
    write_price_csv(&panel.to_bars(), &mut w)?;
    w.flush()?;
    Ok(IngestSummary {
        assets: panel.n_assets(),
        dates: panel.n_dates(),
        first: panel.dates().first().map(|d| d.to_string()).unwrap_or_default(),
        last: panel.dates().last().map(|d| d.to_string()).unwrap_or_default(),
        excluded: excluded.iter().map(|e| e.to_string()).collect(),
    })
}

pub fn load_panel(cfg: &RunConfig) -> Result<PricePanel> {
    let path = out(cfg, PANEL_FILE);
    require(&path, "ingest")?;
    Ok(pit_guard(&load_price_csv(path)?)?.0)
}

pub fn cmd_cpd(cfg: &RunConfig) -> Result<PathBuf> {
    let panel = load_panel(cfg)?;
    let results = run_cpd(&panel, &CpdConfig { lookback: cfg.cpd.lookback, seed: cfg.seed })?;
    let dir = out(cfg, format!("cpd_{}", cfg.cpd.lookback));
    save_cpd_dir(&results, &dir)?;
    Ok(dir)
}

pub fn cmd_features(cfg: &RunConfig) -> Result<()> {
    let panel = load_panel(cfg)?;
    save_feature_csv(&build_features(&panel, None)?, out(cfg, FEATURES_FILE))?;
    if cfg.needs_cpd() {
        let dir = cpd_dir(cfg);
        if cfg.paths.cpd == "compute" {
            require(&dir, "cpd")?;
        }
        let cpd = load_cpd_dir(&dir, panel.assets().iter().map(|a| a.asset_id.as_str()))?;
        save_feature_csv(&build_features(&panel, Some(&to_cpd_table(&cpd)))?, out(cfg, FEATURES_CPD_FILE))?;
    }
    Ok(())
}

fn load_frame(cfg: &RunConfig, cpd: bool) -> Result<FeatureFrame> {
    let path = out(cfg, if cpd { FEATURES_CPD_FILE } else { FEATURES_FILE });
    require(&path, "features")?;
    load_feature_csv(path)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let base = load_frame(cfg, false)?;
    let with_cpd = if cfg.needs_cpd() { Some(load_frame(cfg, true)?) } else { None };
    let tc = cfg.train_config();
    let mut written = Vec::new();
    for v in &cfg.variants {
        let frame = if v.kind.uses_cpd() { with_cpd.as_ref().expect("loaded above") } else { &base };
        let splits = make_walk_forward(
            &frame.dates,
            cfg.walk_forward.first_test_year,
            cfg.walk_forward.last_test_year,
            cfg.walk_forward.validation_fraction,
        )?;
        log::info!("{}: {} splits", v.label(), splits.len());
        let result = walk_forward(frame, &splits, v.kind, &cfg.model_config(v), &tc)?;
        let mut diagnostics: Vec<(i32, TrainDiagnostics)> = Vec::new();
        for s in &result.splits {
            if let Some(trained) = &s.trained {
                let path = out(cfg, format!("checkpoints/{}/{}.json", v.label(), s.split.test_year));
                let mut w = create(&path)?;
                serde_json::to_writer(&mut w, &trained.checkpoint)?;
                w.flush()?;
                diagnostics.push((s.split.test_year, trained.diagnostics.clone()));
            }
        }
        if !diagnostics.is_empty() {
            let mut w = create(&out(cfg, format!("training_{}.json", v.label())))?;
            serde_json::to_writer_pretty(&mut w, &diagnostics)?;
            w.flush()?;
        }
        let path = out(cfg, positions_file(v));
        save_positions_csv(&result.positions, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn load_strategies(cfg: &RunConfig) -> Result<Vec<StrategyPositions>> {
    cfg.variants
        .iter()
        .map(|v| {
            let path = out(cfg, positions_file(v));
            require(&path, "train")?;
            Ok(StrategyPositions { name: v.label(), positions: load_positions_csv(path)? })
        })
        .collect()
}

fn report(cfg: &RunConfig) -> Result<Report> {
    let frame = load_frame(cfg, false)?;
    build_report(&load_strategies(cfg)?, &frame, &cfg.train_config(), &cfg.test_years())
}

/// Daily portfolio returns per strategy, `date,strategy,return`.
pub fn cmd_backtest(cfg: &RunConfig) -> Result<PathBuf> {
    let report = report(cfg)?;
    let path = out(cfg, STRATEGY_RETURNS_FILE);
    let mut w = create(&path)?;
    writeln!(w, "date,strategy,return")?;
    let n = report.daily.first().map_or(0, |(_, s)| s.len());
    for i in 0..n {
        for (name, series) in &report.daily {
            let (date, r) = series[i];
            writeln!(w, "{date},{name},{r:.10}")?;
        }
    }
    w.flush()?;
    Ok(path)
}

pub fn cmd_report(cfg: &RunConfig) -> Result<Report> {
    let report = report(cfg)?;
    let mut w = create(&out(cfg, REPORT_FILE))?;
    write_report_csv(&report.rows, &mut w)?;
    w.flush()?;
    let mut w = create(&out(cfg, CUMULATIVE_FILE))?;
    write_cumulative_csv(&report.cumulative, &mut w)?;
    w.flush()?;
    fs::write(out(cfg, REPORT_MD_FILE), report.to_markdown())?;
    Ok(report)
}

/// Every stage in order; the changepoint stage only when a variant uses it
/// and no precomputed directory is configured.
pub fn cmd_run(cfg: &RunConfig) -> Result<Report> {
    cmd_ingest(cfg)?;
    if cfg.needs_cpd() && cfg.paths.cpd == "compute" {
        cmd_cpd(cfg)?;
    }
    cmd_features(cfg)?;
    cmd_train(cfg)?;
    cmd_backtest(cfg)?;
    cmd_report(cfg)
}

/// Process exit status for an error: 2 for configuration problems, 1 for
/// everything caused by data.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_data_error() {
        1
    } else {
        2
    }
}
