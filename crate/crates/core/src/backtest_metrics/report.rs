use std::collections::HashMap;
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{
    annualized_return, annualized_vol, calmar, downside_risk, max_drawdown, pct_positive, profit_loss_ratio, sharpe,
    sortino,
};
use crate::error::{Error, Result};
use crate::features::FeatureFrame;
use crate::training::{captured_returns, PositionRecord, TrainConfig};

pub const REPORT_HEADER: [&str; 11] = [
    "strategy",
    "period",
    "returns",
    "vol",
    "sharpe",
    "downside_risk",
    "sortino",
    "max_drawdown",
    "calmar",
    "pct_positive",
    "pl_ratio",
];

pub const CUMULATIVE_HEADER: [&str; 3] = ["date", "strategy", "cum_return"];

pub const AVERAGE: &str = "Average";

/// One table line; `None` marks an undefined metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub period: String,
    pub returns_ann: Option<f64>,
    pub vol_ann: Option<f64>,
    pub sharpe: Option<f64>,
    pub downside_risk_ann: Option<f64>,
    pub sortino: Option<f64>,
    pub max_drawdown: Option<f64>,
    pub calmar: Option<f64>,
    pub pct_positive: Option<f64>,
    pub profit_loss_ratio: Option<f64>,
}

impl MetricRow {
    pub fn from_returns(strategy: &str, period: &str, returns: &[f64]) -> MetricRow {
        MetricRow {
            strategy: strategy.to_string(),
            period: period.to_string(),
            returns_ann: annualized_return(returns).ok(),
            vol_ann: annualized_vol(returns).ok(),
            sharpe: sharpe(returns).ok(),
            downside_risk_ann: downside_risk(returns).ok(),
            sortino: sortino(returns).ok(),
            max_drawdown: max_drawdown(returns).ok(),
            calmar: calmar(returns).ok(),
            pct_positive: pct_positive(returns).ok(),
            profit_loss_ratio: profit_loss_ratio(returns).ok(),
        }
    }

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.returns_ann,
            self.vol_ann,
            self.sharpe,
            self.downside_risk_ann,
            self.sortino,
            self.max_drawdown,
            self.calmar,
            self.pct_positive,
            self.profit_loss_ratio,
        ]
    }

    fn from_values(strategy: &str, period: &str, v: [Option<f64>; 9]) -> MetricRow {
        MetricRow {
            strategy: strategy.to_string(),
            period: period.to_string(),
            returns_ann: v[0],
            vol_ann: v[1],
            sharpe: v[2],
            downside_risk_ann: v[3],
            sortino: v[4],
            max_drawdown: v[5],
            calmar: v[6],
            pct_positive: v[7],
            profit_loss_ratio: v[8],
        }
    }
}

/// Arithmetic mean of each metric over `rows`; undefined if any input row
/// has it undefined.
pub fn average_row(strategy: &str, rows: &[MetricRow]) -> MetricRow {
    let mut out = [None; 9];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Option<Vec<f64>> = rows.iter().map(|r| r.values()[k]).collect();
        *slot = vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);
    }
    MetricRow::from_values(strategy, AVERAGE, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub date: NaiveDate,
    pub strategy: String,
    pub cum_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyPositions {
    pub name: String,
    pub positions: Vec<PositionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Year blocks in ascending order, then the average block; strategies
    /// in input order within each block.
    pub rows: Vec<MetricRow>,
    pub cumulative: Vec<CumulativePoint>,
    /// Portfolio daily returns per strategy, keyed by position date.
    pub daily: Vec<(String, Vec<(NaiveDate, f64)>)>,
}

/// Daily portfolio returns of one strategy over `dates`, dated by the
/// position date. Each asset starts flat before the first date.
fn portfolio_returns(
    s: &StrategyPositions,
    frame: &FeatureFrame,
    rows: &[usize],
    tc: &TrainConfig,
) -> Result<Vec<(NaiveDate, f64)>> {
    let lookup: HashMap<(&str, NaiveDate), f64> =
        s.positions.iter().map(|p| ((p.asset_id.as_str(), p.date), p.position)).collect();
    let mut total = vec![0.0; rows.len()];
    for a in &frame.assets {
        let mut x = Vec::with_capacity(rows.len());
        let mut r = Vec::with_capacity(rows.len());
        let mut v = Vec::with_capacity(rows.len());
        for &t in rows {
            let date = frame.dates[t];
            let p = lookup.get(&(a.meta.asset_id.as_str(), date)).ok_or_else(|| {
                Error::Range(format!("{}: no position for {} on {date}", s.name, a.meta.asset_id))
            })?;
            x.push(*p);
            r.push(a.rows[t].next_return.expect("report rows have a next return"));
            v.push(a.rows[t].ewma_vol);
        }
        let z = captured_returns(&x, &r, &v, tc.vol_target, tc.transaction_cost_bp, 0.0)?;
        for (acc, z) in total.iter_mut().zip(z) {
            *acc += z;
        }
    }
    let k = frame.assets.len() as f64;
    Ok(rows.iter().zip(total).map(|(t, z)| (frame.dates[*t], z / k)).collect())
}

/// Per-year metrics, an average block and compounded cumulative returns.
/// Dates without a realized next return (the last panel date) are skipped.
pub fn build_report(
    strategies: &[StrategyPositions],
    frame: &FeatureFrame,
    tc: &TrainConfig,
    years: &[i32],
) -> Result<Report> {
    if frame.assets.is_empty() {
        return Err(Error::Range("report needs at least one asset".into()));
    }
    let rows: Vec<usize> = (0..frame.n_rows())
        .filter(|t| years.contains(&frame.dates[*t].year()))
        .filter(|t| frame.assets.iter().all(|a| a.rows[*t].next_return.is_some()))
        .collect();
    let mut years = years.to_vec();
    years.sort_unstable();
    years.dedup();

    let mut daily = Vec::with_capacity(strategies.len());
    let mut cumulative = Vec::new();
    for s in strategies {
        let series = portfolio_returns(s, frame, &rows, tc)?;
        let mut wealth = 1.0;
        for (date, r) in &series {
            wealth *= 1.0 + r;
            cumulative.push(CumulativePoint { date: *date, strategy: s.name.clone(), cum_return: wealth - 1.0 });
        }
        daily.push((s.name.clone(), series));
    }
    cumulative.sort_by(|a, b| a.date.cmp(&b.date));

    let mut yearly: Vec<Vec<MetricRow>> = vec![Vec::new(); strategies.len()];
    let mut out = Vec::new();
    for year in &years {
        for (k, (name, series)) in daily.iter().enumerate() {
            let r: Vec<f64> = series.iter().filter(|(d, _)| d.year() == *year).map(|(_, r)| *r).collect();
            let row = MetricRow::from_returns(name, &year.to_string(), &r);
            yearly[k].push(row.clone());
            out.push(row);
        }
    }
    for ((name, _), rows) in daily.iter().zip(&yearly) {
        out.push(average_row(name, rows));
    }
    Ok(Report { rows: out, cumulative, daily })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

pub fn write_report_csv<W: Write>(rows: &[MetricRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        let mut rec = vec![r.strategy.clone(), r.period.clone()];
        rec.extend(r.values().into_iter().map(cell));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cumulative_csv<W: Write>(points: &[CumulativePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CUMULATIVE_HEADER)?;
    for p in points {
        w.write_record([p.date.to_string(), p.strategy.clone(), format!("{:.8}", p.cum_return)])?;
    }
    w.flush()?;
    Ok(())
}

impl Report {
    /// Markdown table, percentages for return-like columns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Strategy | Period | Returns | Vol. | Sharpe | Downside Risk | Sortino | Max. Drawdown | Calmar | % Positive | P/L Ratio |\n",
        );
        s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}%", 100.0 * x));
        let num = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.strategy,
                r.period,
                pct(r.returns_ann),
                pct(r.vol_ann),
                num(r.sharpe),
                pct(r.downside_risk_ann),
                num(r.sortino),
                pct(r.max_drawdown),
                num(r.calmar),
                pct(r.pct_positive),
                num(r.profit_loss_ratio),
            ));
        }
        s
    }
}
