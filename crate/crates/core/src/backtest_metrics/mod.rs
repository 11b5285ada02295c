//! Strategy returns, rule-based baselines and the per-year performance
//! table.
//!
//! All metrics take a daily return series. Annualization uses 252 days.
//! Undefined ratios (zero denominator) return
//! [`Error::UndefinedMetric`](crate::Error::UndefinedMetric); in a report
//! they become empty cells rendered as `n/a`.
//!
//! ```
//! use momentum_transformer::backtest_metrics::{max_drawdown, profit_loss_ratio};
//!
//! assert!((max_drawdown(&[0.10, -0.50]).unwrap() - 0.50).abs() < 1e-15);
//! assert_eq!(profit_loss_ratio(&[0.02, -0.01]).unwrap(), 2.0);
//! ```

mod report;

pub use report::{
    average_row, build_report, write_cumulative_csv, write_report_csv, CumulativePoint, MetricRow, Report,
    StrategyPositions, AVERAGE, CUMULATIVE_HEADER, REPORT_HEADER,
};

use crate::error::{Error, Result};
use crate::features::{FeatureFrame, MACD_TIMESCALES};
use crate::training::ANNUALIZATION;

/// Normalizer of the momentum response curve.
pub const RESPONSE_NORM: f64 = 0.89;

fn need(returns: &[f64], n: usize, metric: &str) -> Result<()> {
    if returns.len() < n {
        return Err(Error::Range(format!("{metric} needs at least {n} returns, got {}", returns.len())));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn annualized_return(returns: &[f64]) -> Result<f64> {
    need(returns, 2, "annualized return")?;
    Ok(mean(returns) * ANNUALIZATION)
}

/// Sample standard deviation (n - 1) scaled by sqrt(252). Exactly zero for
/// a constant series.
pub fn annualized_vol(returns: &[f64]) -> Result<f64> {
    need(returns, 2, "annualized volatility")?;
    if returns.iter().all(|r| *r == returns[0]) {
        return Ok(0.0);
    }
    let m = mean(returns);
    let ss: f64 = returns.iter().map(|r| (r - m) * (r - m)).sum();
    Ok((ss / (returns.len() - 1) as f64).sqrt() * ANNUALIZATION.sqrt())
}

pub fn sharpe(returns: &[f64]) -> Result<f64> {
    let vol = annualized_vol(returns)?;
    if vol == 0.0 {
        return Err(Error::UndefinedMetric("sharpe"));
    }
    Ok(annualized_return(returns)? / vol)
}

/// Semideviation about zero over all days, annualized.
pub fn downside_risk(returns: &[f64]) -> Result<f64> {
    need(returns, 2, "downside risk")?;
    let ss: f64 = returns.iter().map(|r| r.min(0.0).powi(2)).sum();
    Ok((ss / returns.len() as f64).sqrt() * ANNUALIZATION.sqrt())
}

pub fn sortino(returns: &[f64]) -> Result<f64> {
    let dr = downside_risk(returns)?;
    if dr == 0.0 {
        return Err(Error::UndefinedMetric("sortino"));
    }
    Ok(annualized_return(returns)? / dr)
}

/// Largest peak-to-trough fall of compounded wealth, as a fraction of the
/// peak. Wealth starts at 1 before the first return.
pub fn max_drawdown(returns: &[f64]) -> Result<f64> {
    need(returns, 1, "max drawdown")?;
    let mut wealth = 1.0;
    let mut peak = 1.0_f64;
    let mut worst = 0.0_f64;
    for r in returns {
        wealth *= 1.0 + r;
        peak = peak.max(wealth);
        worst = worst.max((peak - wealth) / peak);
    }
    Ok(worst)
}

pub fn calmar(returns: &[f64]) -> Result<f64> {
    let mdd = max_drawdown(returns)?;
    if mdd == 0.0 {
        return Err(Error::UndefinedMetric("calmar"));
    }
    Ok(annualized_return(returns)? / mdd)
}

pub fn pct_positive(returns: &[f64]) -> Result<f64> {
    need(returns, 1, "percent positive")?;
    Ok(returns.iter().filter(|r| **r > 0.0).count() as f64 / returns.len() as f64)
}

/// Mean gain on up days over the absolute mean loss on down days.
pub fn profit_loss_ratio(returns: &[f64]) -> Result<f64> {
    need(returns, 1, "profit/loss ratio")?;
    let gains: Vec<f64> = returns.iter().copied().filter(|r| *r > 0.0).collect();
    let losses: Vec<f64> = returns.iter().copied().filter(|r| *r < 0.0).collect();
    if gains.is_empty() || losses.is_empty() {
        return Err(Error::UndefinedMetric("profit/loss ratio"));
    }
    Ok(mean(&gains) / mean(&losses).abs())
}

/// Response curve `y * exp(-y^2 / 4) / 0.89`; peaks at `y = sqrt(2)`.
pub fn response(y: f64) -> f64 {
    y * (-y * y / 4.0).exp() / RESPONSE_NORM
}

/// Classical momentum position: mean response over the MACD timescales,
/// clamped to [-1, 1].
pub fn momentum_position(signals: &[f64; MACD_TIMESCALES.len()]) -> f64 {
    (signals.iter().map(|y| response(*y)).sum::<f64>() / signals.len() as f64).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    LongOnly,
    MacdMomentum,
}

/// Baseline positions for every row, indexed `[asset][row]`.
pub fn baseline_positions(kind: Baseline, frame: &FeatureFrame) -> Result<Vec<Vec<f64>>> {
    frame
        .assets
        .iter()
        .map(|a| {
            a.rows
                .iter()
                .enumerate()
                .map(|(t, row)| match kind {
                    Baseline::LongOnly => Ok(1.0),
                    Baseline::MacdMomentum => {
                        if row.macd.iter().all(|s| s.is_finite()) {
                            Ok(momentum_position(&row.macd))
                        } else {
                            Err(Error::MissingFeature(format!(
                                "MACD signal for {} on {}",
                                a.meta.asset_id, frame.dates[t]
                            )))
                        }
                    }
                })
                .collect()
        })
        .collect()
}
