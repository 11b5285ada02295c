//! Close-price ingestion, point-in-time checks, panel alignment and
//! expanding-window splits.
//!
//! The input file is a flat CSV with header
//! `asset_id,ticker,date,close,sector_group`. Universe selection happens
//! upstream; this module only validates and aligns what it is given.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRICE_HEADER: [&str; 5] = ["asset_id", "ticker", "date", "close", "sector_group"];

/// Broad industry buckets used to diversify the universe; the index of a
/// group is the static category fed to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectorGroup {
    Agriculture,
    Mining,
    Construction,
    Manufacturing,
    TransportUtilities,
    Wholesale,
    Retail,
    Finance,
    Services,
}

impl SectorGroup {
    pub const ALL: [SectorGroup; 9] = [
        SectorGroup::Agriculture,
        SectorGroup::Mining,
        SectorGroup::Construction,
        SectorGroup::Manufacturing,
        SectorGroup::TransportUtilities,
        SectorGroup::Wholesale,
        SectorGroup::Retail,
        SectorGroup::Finance,
        SectorGroup::Services,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SectorGroup::Agriculture => "Agriculture",
            SectorGroup::Mining => "Mining",
            SectorGroup::Construction => "Construction",
            SectorGroup::Manufacturing => "Manufacturing",
            SectorGroup::TransportUtilities => "Transport/Utilities",
            SectorGroup::Wholesale => "Wholesale",
            SectorGroup::Retail => "Retail",
            SectorGroup::Finance => "Finance",
            SectorGroup::Services => "Services",
        }
    }

    /// Maps a four-digit SIC code onto its bucket.
    pub fn from_sic(code: u16) -> Option<SectorGroup> {
        Some(match code {
            100..=199 => SectorGroup::Agriculture,
            1000..=1499 => SectorGroup::Mining,
            1500..=1799 => SectorGroup::Construction,
            2000..=3999 => SectorGroup::Manufacturing,
            4000..=4999 => SectorGroup::TransportUtilities,
            5000..=5199 => SectorGroup::Wholesale,
            5200..=5999 => SectorGroup::Retail,
            6000..=6799 => SectorGroup::Finance,
            7000..=8999 => SectorGroup::Services,
            _ => return None,
        })
    }
}

impl fmt::Display for SectorGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SectorGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        SectorGroup::ALL
            .into_iter()
            .find(|g| {
                let name: String = g.as_str().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
                name.to_ascii_lowercase() == key
            })
            .ok_or_else(|| format!("unknown sector group {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriceBar {
    pub asset_id: String,
    pub ticker: String,
    pub date: NaiveDate,
    pub close: f64,
    pub sector: SectorGroup,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetMeta {
    pub asset_id: String,
    pub ticker: String,
    pub sector: SectorGroup,
}

/// Aligned close prices: every asset has a close on every panel date.
#[derive(Clone, Debug, PartialEq)]
pub struct PricePanel {
    dates: Vec<NaiveDate>,
    assets: Vec<AssetMeta>,
    /// `closes[asset][date]`
    closes: Vec<Vec<f64>>,
}

impl PricePanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<AssetMeta>, closes: Vec<Vec<f64>>) -> Result<Self> {
        if !dates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Universe("panel dates must be strictly increasing".into()));
        }
        if assets.len() != closes.len() || closes.iter().any(|c| c.len() != dates.len()) {
            return Err(Error::Universe("close matrix does not match dates x assets".into()));
        }
        if closes.iter().flatten().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Universe("closes must be finite and positive".into()));
        }
        Ok(PricePanel { dates, assets, closes })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[AssetMeta] {
        &self.assets
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn closes(&self, asset: usize) -> &[f64] {
        &self.closes[asset]
    }

    /// Panel restricted to dates `<= last`.
    pub fn truncate(&self, last: NaiveDate) -> PricePanel {
        let n = self.dates.partition_point(|d| *d <= last);
        PricePanel {
            dates: self.dates[..n].to_vec(),
            assets: self.assets.clone(),
            closes: self.closes.iter().map(|c| c[..n].to_vec()).collect(),
        }
    }

    pub fn to_bars(&self) -> Vec<PriceBar> {
        let mut bars = Vec::with_capacity(self.n_assets() * self.n_dates());
        for (meta, closes) in self.assets.iter().zip(&self.closes) {
            for (date, close) in self.dates.iter().zip(closes) {
                bars.push(PriceBar {
                    asset_id: meta.asset_id.clone(),
                    ticker: meta.ticker.clone(),
                    date: *date,
                    close: *close,
                    sector: meta.sector,
                });
            }
        }
        bars
    }
}

/// An asset dropped while aligning the panel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exclusion {
    pub asset_id: String,
    pub reason: String,
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WARN excluded {} {}", self.asset_id, self.reason)
    }
}

pub fn load_price_csv(path: impl AsRef<Path>) -> Result<Vec<PriceBar>> {
    read_price_csv(std::fs::File::open(path)?)
}

pub fn read_price_csv<R: Read>(reader: R) -> Result<Vec<PriceBar>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    if header.iter().collect::<Vec<_>>() != PRICE_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", PRICE_HEADER.join(",")) });
    }
    let mut bars = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse { line, message };
        let date = NaiveDate::parse_from_str(&record[2], "%Y-%m-%d")
            .map_err(|e| parse_err(format!("date {:?}: {e}", &record[2])))?;
        let close: f64 = record[3].parse().map_err(|e| parse_err(format!("close {:?}: {e}", &record[3])))?;
        if !(close > 0.0 && close.is_finite()) {
            return Err(Error::Data { line, message: format!("close must be positive, got {close}") });
        }
        let sector = record[4].parse().map_err(parse_err)?;
        bars.push(PriceBar {
            asset_id: record[0].to_string(),
            ticker: record[1].to_string(),
            date,
            close,
            sector,
        });
    }
    Ok(bars)
}

pub fn write_price_csv<W: Write>(bars: &[PriceBar], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PRICE_HEADER)?;
    for b in bars {
        w.write_record([
            b.asset_id.as_str(),
            b.ticker.as_str(),
            &b.date.format("%Y-%m-%d").to_string(),
            &b.close.to_string(),
            b.sector.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Validates point-in-time integrity and aligns bars into a panel.
///
/// Any repeated `(asset_id, date)` pair is rejected outright: a second
/// listing on the same day shifts next-day targets onto same-day rows.
/// The panel calendar is the set of dates carried by at least half of the
/// assets; assets missing any calendar date are excluded (never filled)
/// and reported in the returned list.
pub fn pit_guard(bars: &[PriceBar]) -> Result<(PricePanel, Vec<Exclusion>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut per_asset: HashMap<&str, (AssetMeta, BTreeMap<NaiveDate, f64>)> = HashMap::new();
    for bar in bars {
        let entry = per_asset.entry(bar.asset_id.as_str()).or_insert_with(|| {
            order.push(bar.asset_id.as_str());
            (
                AssetMeta { asset_id: bar.asset_id.clone(), ticker: bar.ticker.clone(), sector: bar.sector },
                BTreeMap::new(),
            )
        });
        if entry.0.sector != bar.sector {
            return Err(Error::Universe(format!("asset {} appears with two sector groups", bar.asset_id)));
        }
        if entry.1.insert(bar.date, bar.close).is_some() {
            return Err(Error::PitViolation { asset_id: bar.asset_id.clone(), date: bar.date });
        }
    }

    let mut counts: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for (_, series) in per_asset.values() {
        for d in series.keys() {
            *counts.entry(*d).or_default() += 1;
        }
    }
    let quorum = per_asset.len().div_ceil(2);
    let calendar: Vec<NaiveDate> = counts.into_iter().filter(|(_, c)| *c >= quorum).map(|(d, _)| d).collect();

    let mut assets = Vec::new();
    let mut closes = Vec::new();
    let mut excluded = Vec::new();
    for id in order {
        let (meta, series) = &per_asset[id];
        let missing = calendar.iter().filter(|d| !series.contains_key(d)).count();
        if missing > 0 {
            excluded.push(Exclusion {
                asset_id: id.to_string(),
                reason: format!("missing {missing} of {} panel dates", calendar.len()),
            });
            continue;
        }
        assets.push(meta.clone());
        closes.push(calendar.iter().map(|d| series[d]).collect());
    }
    if assets.len() < 2 {
        return Err(Error::Universe(format!("{} assets survive alignment, need at least 2", assets.len())));
    }
    Ok((PricePanel::new(calendar, assets, closes)?, excluded))
}

/// One expanding-window step: train on everything before `test_start`,
/// validate on the chronologically last fraction of that range, test on a
/// calendar year.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardSplit {
    pub test_year: i32,
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub validation_start: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub validation_fraction: f64,
}

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.20;

/// Minimum number of dates before the first test year.
pub const MIN_TRAIN_DATES: usize = 252;

pub fn make_walk_forward(
    dates: &[NaiveDate],
    first_test_year: i32,
    last_test_year: i32,
    validation_fraction: f64,
) -> Result<Vec<WalkForwardSplit>> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Range(format!("validation fraction {validation_fraction} outside (0, 1)")));
    }
    if last_test_year < first_test_year {
        return Err(Error::Range(format!("last test year {last_test_year} precedes {first_test_year}")));
    }
    let before_first = dates.iter().filter(|d| d.year() < first_test_year).count();
    if before_first < MIN_TRAIN_DATES {
        return Err(Error::Range(format!(
            "{before_first} dates before {first_test_year}, need at least {MIN_TRAIN_DATES}"
        )));
    }
    (first_test_year..=last_test_year)
        .map(|year| {
            let n_train = dates.partition_point(|d| d.year() < year);
            let test: Vec<&NaiveDate> = dates[n_train..].iter().take_while(|d| d.year() == year).collect();
            let (Some(first), Some(last)) = (test.first(), test.last()) else {
                return Err(Error::Range(format!("no dates in test year {year}")));
            };
            let n_val = validation_len(n_train, validation_fraction);
            Ok(WalkForwardSplit {
                test_year: year,
                train_start: dates[0],
                train_end: dates[n_train - 1],
                validation_start: dates[n_train - n_val],
                test_start: **first,
                test_end: **last,
                validation_fraction,
            })
        })
        .collect()
}

/// Number of trailing training dates held out for validation.
pub fn validation_len(n_train: usize, fraction: f64) -> usize {
    ((n_train as f64 * fraction).round() as usize).clamp(1, n_train.saturating_sub(1).max(1))
}

/// Distinct years present in `dates`, ascending.
pub fn years(dates: &[NaiveDate]) -> Vec<i32> {
    let set: HashSet<i32> = dates.iter().map(|d| d.year()).collect();
    let mut v: Vec<i32> = set.into_iter().collect();
    v.sort_unstable();
    v
}
