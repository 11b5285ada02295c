//! Model inputs built from close prices.
//!
//! Per asset and date: volatility-normalized returns over five horizons,
//! three normalized MACD signals, the EWMA volatility used for position
//! sizing, and the next day's return (a training target, never an input).
//! Changepoint score and location can be joined on when available.
//!
//! Everything at date `t` is computed from closes at dates `<= t` by
//! forward recursions that start from the first observation, so truncating
//! a panel never changes an earlier row.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::market_data::{AssetMeta, PricePanel};

pub const RETURN_HORIZONS: [usize; 5] = [1, 21, 63, 126, 252];
pub const MACD_TIMESCALES: [(usize, usize); 3] = [(8, 24), (16, 48), (32, 96)];
pub const VOL_SPAN: usize = 60;
pub const VOL_FLOOR: f64 = 1e-8;
pub const PRICE_STD_WINDOW: usize = 63;
pub const SIGNAL_STD_WINDOW: usize = 252;

/// Number of model inputs without and with changepoint features.
pub const BASE_FEATURES: usize = RETURN_HORIZONS.len() + MACD_TIMESCALES.len();
pub const CPD_FEATURES: usize = BASE_FEATURES + 2;

pub fn simple_returns(closes: &[f64]) -> Result<Vec<f64>> {
    if closes.len() < 2 {
        return Err(Error::InvalidSeries(format!("need at least 2 closes, got {}", closes.len())));
    }
    if let Some(bad) = closes.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(Error::InvalidSeries(format!("nonpositive close {bad}")));
    }
    Ok(closes.windows(2).map(|w| w[1] / w[0] - 1.0).collect())
}

/// Exponentially weighted standard deviation with decay
/// `1 - 2 / (span + 1)`. The recursion is seeded with the first return as
/// mean and its square as variance, and the result is floored at
/// [`VOL_FLOOR`].
pub fn ewma_vol(returns: &[f64], span: usize) -> Result<Vec<f64>> {
    if span < 2 {
        return Err(Error::InvalidSeries(format!("ewma span must be >= 2, got {span}")));
    }
    let decay = 1.0 - 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(returns.len());
    let Some(&first) = returns.first() else {
        return Ok(out);
    };
    let (mut mean, mut var) = (first, first * first);
    out.push(var.sqrt().max(VOL_FLOOR));
    for &r in &returns[1..] {
        let delta = r - mean;
        mean += (1.0 - decay) * delta;
        var = decay * (var + (1.0 - decay) * delta * delta);
        out.push(var.sqrt().max(VOL_FLOOR));
    }
    Ok(out)
}

/// Compounded return over the trailing `horizon` returns, divided by
/// `vol_t * sqrt(horizon)`. `None` where fewer than `horizon` returns exist.
pub fn norm_return(returns: &[f64], vol: &[f64], horizon: usize) -> Result<Vec<Option<f64>>> {
    if horizon == 0 || returns.len() != vol.len() {
        return Err(Error::InvalidSeries(format!(
            "horizon {horizon} with {} returns and {} vols",
            returns.len(),
            vol.len()
        )));
    }
    let scale = (horizon as f64).sqrt();
    Ok((0..returns.len())
        .map(|t| {
            (t + 1 >= horizon).then(|| {
                let growth = returns[t + 1 - horizon..=t].iter().fold(1.0, |acc, r| acc * (1.0 + r));
                (growth - 1.0) / (vol[t] * scale)
            })
        })
        .collect())
}

/// Half-life EWMA: decay `0.5^(1/span)`, seeded with the first value.
fn ewma_halflife(values: &[f64], span: usize) -> Vec<f64> {
    let decay = 0.5f64.powf(1.0 / span as f64);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(v) => *v,
        None => return out,
    };
    out.push(acc);
    for &v in &values[1..] {
        acc = decay * acc + (1.0 - decay) * v;
        out.push(acc);
    }
    out
}

/// Sample standard deviation over each trailing window of defined values,
/// floored at [`VOL_FLOOR`].
fn rolling_std(values: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; values.len()];
    for t in 0..values.len() {
        if t + 1 < window {
            continue;
        }
        let slice = &values[t + 1 - window..=t];
        if slice.iter().any(Option::is_none) {
            continue;
        }
        let mean = slice.iter().map(|v| v.unwrap()).sum::<f64>() / window as f64;
        let var = slice.iter().map(|v| (v.unwrap() - mean).powi(2)).sum::<f64>() / (window as f64 - 1.0);
        out[t] = Some(var.sqrt().max(VOL_FLOOR));
    }
    out
}

/// Normalized MACD: `(ewma_S - ewma_L) / std63(close)`, then divided by its
/// own trailing 252-day standard deviation. Aligned with `closes`.
pub fn macd_signal(closes: &[f64], short: usize, long: usize) -> Result<Vec<Option<f64>>> {
    if short == 0 || short >= long {
        return Err(Error::InvalidSeries(format!("MACD timescales ({short}, {long}) need 0 < short < long")));
    }
    let fast = ewma_halflife(closes, short);
    let slow = ewma_halflife(closes, long);
    let prices: Vec<Option<f64>> = closes.iter().map(|c| Some(*c)).collect();
    let price_std = rolling_std(&prices, PRICE_STD_WINDOW);
    let q: Vec<Option<f64>> = (0..closes.len()).map(|t| price_std[t].map(|s| (fast[t] - slow[t]) / s)).collect();
    let q_std = rolling_std(&q, SIGNAL_STD_WINDOW);
    Ok(q.iter().zip(&q_std).map(|(q, s)| Some(q.as_ref()? / s.as_ref()?)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpdFeatures {
    pub score: f64,
    pub location_norm: f64,
}

/// Changepoint features keyed by `(asset_id, date)`.
pub type CpdTable = BTreeMap<(String, NaiveDate), CpdFeatures>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureRow {
    pub norm_returns: [f64; RETURN_HORIZONS.len()],
    pub macd: [f64; MACD_TIMESCALES.len()],
    pub ewma_vol: f64,
    /// Simple return from this date's close to the next; `None` on the last date.
    pub next_return: Option<f64>,
    pub cpd: Option<CpdFeatures>,
}

impl FeatureRow {
    /// The model input vector `u` for this row.
    pub fn inputs(&self, use_cpd: bool) -> Vec<f64> {
        let mut v = Vec::with_capacity(CPD_FEATURES);
        v.extend_from_slice(&self.norm_returns);
        v.extend_from_slice(&self.macd);
        if use_cpd {
            let cpd = self.cpd.expect("frame built with changepoint features");
            v.push(cpd.score);
            v.push(cpd.location_norm);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssetFeatures {
    pub meta: AssetMeta,
    /// One row per frame date.
    pub rows: Vec<FeatureRow>,
}

/// Feature rows on a calendar shared by every asset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<AssetFeatures>,
    pub has_cpd: bool,
}

impl FeatureFrame {
    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_features(&self, use_cpd: bool) -> usize {
        if use_cpd {
            CPD_FEATURES
        } else {
            BASE_FEATURES
        }
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Inputs for rows `start..=end` of one asset, flattened row-major.
    pub fn window_inputs(&self, asset: usize, start: usize, end: usize, use_cpd: bool) -> Vec<f64> {
        self.assets[asset].rows[start..=end].iter().flat_map(|r| r.inputs(use_cpd)).collect()
    }
}

/// Assembles the frame. Rows before every feature is defined (the longest
/// lookback) are dropped; with changepoint data, dates where any asset lacks
/// a record are dropped too.
pub fn build_features(panel: &PricePanel, cpd: Option<&CpdTable>) -> Result<FeatureFrame> {
    if let Some(table) = cpd {
        for (asset_id, date) in table.keys() {
            let known_asset = panel.assets().iter().any(|a| &a.asset_id == asset_id);
            if !known_asset || panel.dates().binary_search(date).is_err() {
                return Err(Error::Join(format!("changepoint record for unknown key ({asset_id}, {date})")));
            }
        }
    }

    let n = panel.n_dates();
    let mut per_asset: Vec<Vec<Option<FeatureRow>>> = Vec::with_capacity(panel.n_assets());
    for (a, meta) in panel.assets().iter().enumerate() {
        let closes = panel.closes(a);
        let returns = simple_returns(closes)?;
        let vol = ewma_vol(&returns, VOL_SPAN)?;
        let horizons = RETURN_HORIZONS
            .iter()
            .map(|h| norm_return(&returns, &vol, *h))
            .collect::<Result<Vec<_>>>()?;
        let macds = MACD_TIMESCALES
            .iter()
            .map(|(s, l)| macd_signal(closes, *s, *l))
            .collect::<Result<Vec<_>>>()?;

        // returns[j] is dated j + 1.
        let rows = (0..n)
            .map(|t| {
                if t == 0 {
                    return None;
                }
                let mut norm_returns = [0.0; RETURN_HORIZONS.len()];
                for (slot, series) in norm_returns.iter_mut().zip(&horizons) {
                    *slot = series[t - 1]?;
                }
                let mut macd = [0.0; MACD_TIMESCALES.len()];
                for (slot, series) in macd.iter_mut().zip(&macds) {
                    *slot = series[t]?;
                }
                let cpd = match cpd {
                    Some(table) => Some(*table.get(&(meta.asset_id.clone(), panel.dates()[t]))?),
                    None => None,
                };
                Some(FeatureRow {
                    norm_returns,
                    macd,
                    ewma_vol: vol[t - 1],
                    next_return: returns.get(t).copied(),
                    cpd,
                })
            })
            .collect();
        per_asset.push(rows);
    }

    let keep: Vec<usize> = (0..n).filter(|t| per_asset.iter().all(|rows| rows[*t].is_some())).collect();
    Ok(FeatureFrame {
        dates: keep.iter().map(|t| panel.dates()[*t]).collect(),
        assets: panel
            .assets()
            .iter()
            .zip(per_asset)
            .map(|(meta, rows)| AssetFeatures {
                meta: meta.clone(),
                rows: keep.iter().map(|t| rows[*t].unwrap()).collect(),
            })
            .collect(),
        has_cpd: cpd.is_some(),
    })
}

pub const FEATURE_HEADER: [&str; 16] = [
    "asset_id",
    "ticker",
    "sector_group",
    "date",
    "norm_ret_1",
    "norm_ret_21",
    "norm_ret_63",
    "norm_ret_126",
    "norm_ret_252",
    "macd_8_24",
    "macd_16_48",
    "macd_32_96",
    "ewma_vol",
    "next_return",
    "cp_score",
    "cp_location_norm",
];

/// One row per `(asset_id, date)`, asset-major; absent values are empty cells.
pub fn write_feature_csv<W: Write>(frame: &FeatureFrame, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FEATURE_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for asset in &frame.assets {
        for (date, row) in frame.dates.iter().zip(&asset.rows) {
            let mut rec = vec![
                asset.meta.asset_id.clone(),
                asset.meta.ticker.clone(),
                asset.meta.sector.to_string(),
                date.format("%Y-%m-%d").to_string(),
            ];
            rec.extend(row.norm_returns.iter().chain(&row.macd).map(f64::to_string));
            rec.push(row.ewma_vol.to_string());
            rec.push(opt(row.next_return));
            rec.push(opt(row.cpd.map(|c| c.score)));
            rec.push(opt(row.cpd.map(|c| c.location_norm)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_feature_csv(frame: &FeatureFrame, path: impl AsRef<Path>) -> Result<()> {
    write_feature_csv(frame, std::fs::File::create(path)?)
}

pub fn load_feature_csv(path: impl AsRef<Path>) -> Result<FeatureFrame> {
    read_feature_csv(std::fs::File::open(path)?)
}

pub fn read_feature_csv<R: Read>(reader: R) -> Result<FeatureFrame> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().collect::<Vec<_>>() != FEATURE_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", FEATURE_HEADER.join(",")) });
    }
    let mut assets: Vec<AssetFeatures> = Vec::new();
    let mut dates_by_asset: Vec<Vec<NaiveDate>> = Vec::new();
    let mut has_cpd = None;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let err = |message: String| Error::Parse { line, message };
        let num = |i: usize| -> Result<f64> { record[i].parse::<f64>().map_err(|e| err(format!("{}: {e}", FEATURE_HEADER[i]))) };
        let opt = |i: usize| -> Result<Option<f64>> { if record[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
        let meta = AssetMeta {
            asset_id: record[0].to_string(),
            ticker: record[1].to_string(),
            sector: record[2].parse().map_err(err)?,
        };
        let date = NaiveDate::parse_from_str(&record[3], "%Y-%m-%d").map_err(|e| err(e.to_string()))?;
        let mut norm_returns = [0.0; RETURN_HORIZONS.len()];
        for (k, slot) in norm_returns.iter_mut().enumerate() {
            *slot = num(4 + k)?;
        }
        let mut macd = [0.0; MACD_TIMESCALES.len()];
        for (k, slot) in macd.iter_mut().enumerate() {
            *slot = num(9 + k)?;
        }
        let cpd = match (opt(14)?, opt(15)?) {
            (Some(score), Some(location_norm)) => Some(CpdFeatures { score, location_norm }),
            (None, None) => None,
            _ => return Err(err("changepoint columns must be both present or both empty".into())),
        };
        if *has_cpd.get_or_insert(cpd.is_some()) != cpd.is_some() {
            return Err(err("changepoint columns present on some rows only".into()));
        }
        let row = FeatureRow { norm_returns, macd, ewma_vol: num(12)?, next_return: opt(13)?, cpd };
        match assets.iter().position(|a| a.meta.asset_id == meta.asset_id) {
            Some(i) => {
                assets[i].rows.push(row);
                dates_by_asset[i].push(date);
            }
            None => {
                assets.push(AssetFeatures { meta, rows: vec![row] });
                dates_by_asset.push(vec![date]);
            }
        }
    }
    let dates = dates_by_asset.first().cloned().unwrap_or_default();
    if dates_by_asset.iter().any(|d| *d != dates) || !dates.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Join("feature rows are not on one shared, increasing calendar".into()));
    }
    Ok(FeatureFrame { dates, assets, has_cpd: has_cpd.unwrap_or(false) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::SectorGroup;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_walk(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = 100.0;
        (0..n)
            .map(|_| {
                p *= 1.0 + rng.gen_range(-0.02..0.02);
                p
            })
            .collect()
    }

    fn panel(n: usize, assets: usize) -> PricePanel {
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        let dates = (0..n as u64).map(|i| start + chrono::Days::new(i)).collect();
        let metas = (0..assets)
            .map(|i| AssetMeta { asset_id: format!("A{i}"), ticker: format!("T{i}"), sector: SectorGroup::ALL[i % 9] })
            .collect();
        let closes = (0..assets).map(|i| random_walk(i as u64 + 1, n)).collect();
        PricePanel::new(dates, metas, closes).unwrap()
    }

    #[test]
    fn simple_returns_examples() {
        assert_eq!(simple_returns(&[100.0, 101.0]).unwrap()[0], 101.0 / 100.0 - 1.0);
        assert!((simple_returns(&[100.0, 101.0]).unwrap()[0] - 0.01).abs() < 1e-15);
        assert_eq!(simple_returns(&[5.0; 4]).unwrap(), vec![0.0; 3]);
        assert_eq!(simple_returns(&[100.0, 50.0, 100.0]).unwrap(), vec![-0.5, 1.0]);
        assert!(simple_returns(&[100.0, 0.0]).is_err());
        assert!(simple_returns(&[100.0]).is_err());
    }

    #[test]
    fn ewma_vol_of_constant_returns_decays_to_floor() {
        let vol = ewma_vol(&vec![0.01; 3000], VOL_SPAN).unwrap();
        assert!(vol.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*vol.last().unwrap(), VOL_FLOOR);
        assert_eq!(ewma_vol(&[0.0; 5], VOL_SPAN).unwrap(), vec![VOL_FLOOR; 5]);
    }

    #[test]
    fn ewma_vol_jumps_on_a_shock() {
        let mut r = vec![0.001; 50];
        r.push(0.05);
        let vol = ewma_vol(&r, VOL_SPAN).unwrap();
        assert!(vol[50] > vol[49]);
    }

    /// Closed form: weighted variance about the weighted mean with weights
    /// `decay^t` on the seed and `(1-decay) decay^(t-j)` elsewhere, plus the
    /// seed's `decay^t r_0^2`.
    #[test]
    fn ewma_vol_matches_closed_form_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r: Vec<f64> = (0..10).map(|_| rng.gen_range(-0.03..0.03)).collect();
        let vol = ewma_vol(&r, VOL_SPAN).unwrap();
        let lam = 1.0 - 2.0 / (VOL_SPAN as f64 + 1.0);
        for t in 0..r.len() {
            let w: Vec<f64> = (0..=t)
                .map(|j| if j == 0 { lam.powi(t as i32) } else { (1.0 - lam) * lam.powi((t - j) as i32) })
                .collect();
            let mean: f64 = w.iter().zip(&r).map(|(w, x)| w * x).sum();
            let var: f64 = w.iter().zip(&r).map(|(w, x)| w * (x - mean).powi(2)).sum::<f64>()
                + lam.powi(t as i32) * r[0] * r[0];
            assert!((vol[t] - var.sqrt()).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn norm_return_examples() {
        let y = norm_return(&[0.02], &[0.02], 1).unwrap();
        assert!((y[0].unwrap() - 1.0).abs() < 1e-15);
        let zeros = norm_return(&[0.0; 30], &[0.01; 30], 21).unwrap();
        assert!(zeros.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(zeros.iter().flatten().count(), 10);
    }

    #[test]
    fn norm_return_matches_price_ratio() {
        let closes = random_walk(4, 200);
        let r = simple_returns(&closes).unwrap();
        let vol = ewma_vol(&r, VOL_SPAN).unwrap();
        let y = norm_return(&r, &vol, 21).unwrap();
        for t in 20..r.len() {
            // returns[t] is dated t + 1, so the window spans closes t-20 ..= t+1.
            let direct = (closes[t + 1] / closes[t - 20] - 1.0) / (vol[t] * 21f64.sqrt());
            assert!((y[t].unwrap() - direct).abs() < 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn macd_of_constant_prices_is_zero() {
        let s = macd_signal(&[42.0; 400], 8, 24).unwrap();
        assert!(s.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(s.iter().flatten().count(), 400 - (PRICE_STD_WINDOW - 1) - (SIGNAL_STD_WINDOW - 1));
    }

    #[test]
    fn macd_on_a_ramp_is_positive() {
        let ramp: Vec<f64> = (0..400).map(|i| 10.0 + i as f64 * 0.1).collect();
        for (s, l) in MACD_TIMESCALES {
            let fast = ewma_halflife(&ramp, s);
            let slow = ewma_halflife(&ramp, l);
            assert!((1..400).all(|t| fast[t] - slow[t] > 0.0));
            assert!(macd_signal(&ramp, s, l).unwrap().iter().flatten().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn macd_rejects_inverted_timescales() {
        assert!(macd_signal(&[1.0; 10], 24, 8).is_err());
    }

    /// Step-by-step evaluation of the same definition with no shared helpers.
    #[test]
    fn macd_matches_step_by_step_oracle() {
        let closes = random_walk(17, 400);
        let (s, l) = (16usize, 48usize);
        let signal = macd_signal(&closes, s, l).unwrap();
        let (ds, dl) = (0.5f64.powf(1.0 / s as f64), 0.5f64.powf(1.0 / l as f64));
        let mut fast = vec![closes[0]];
        let mut slow = vec![closes[0]];
        for t in 1..closes.len() {
            fast.push(ds * fast[t - 1] + (1.0 - ds) * closes[t]);
            slow.push(dl * slow[t - 1] + (1.0 - dl) * closes[t]);
        }
        let std = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
        let mut q = vec![f64::NAN; closes.len()];
        for t in 62..closes.len() {
            q[t] = (fast[t] - slow[t]) / std(&closes[t - 62..=t]);
        }
        for t in 0..closes.len() {
            let expect = (t >= 62 + 251).then(|| q[t] / std(&q[t - 251..=t]));
            match (signal[t], expect) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "t={t}"),
                other => panic!("definedness mismatch at {t}: {other:?}"),
            }
        }
    }

    #[test]
    fn warm_up_is_set_by_the_longest_lookback() {
        let frame = build_features(&panel(400, 2), None).unwrap();
        let warm_up = PRICE_STD_WINDOW - 1 + SIGNAL_STD_WINDOW - 1;
        assert_eq!(frame.n_rows(), 400 - warm_up);
        assert_eq!(frame.dates[0], panel(400, 2).dates()[warm_up]);
        assert!(!frame.has_cpd);
        assert!(frame.assets[0].rows.iter().all(|r| r.cpd.is_none()));
        assert!(build_features(&panel(300, 2), None).unwrap().n_rows() == 0);
    }

    #[test]
    fn next_return_is_the_following_days_return() {
        let p = panel(500, 3);
        let frame = build_features(&p, None).unwrap();
        for (a, asset) in frame.assets.iter().enumerate() {
            let closes = p.closes(a);
            for (i, row) in asset.rows.iter().enumerate() {
                let t = p.dates().binary_search(&frame.dates[i]).unwrap();
                match row.next_return {
                    Some(r) => assert_eq!(r, closes[t + 1] / closes[t] - 1.0),
                    None => assert_eq!(t, p.n_dates() - 1),
                }
            }
            assert!(asset.rows.last().unwrap().next_return.is_none());
        }
    }

    #[test]
    fn unknown_changepoint_key_is_a_join_error() {
        let p = panel(400, 2);
        let mut table = CpdTable::new();
        table.insert(("ZZZ".into(), p.dates()[350]), CpdFeatures { score: 0.1, location_norm: 0.2 });
        assert!(matches!(build_features(&p, Some(&table)), Err(Error::Join(_))));
    }

    #[test]
    fn changepoint_columns_join_by_date() {
        let p = panel(400, 2);
        let mut table = CpdTable::new();
        for a in p.assets() {
            for (t, d) in p.dates().iter().enumerate().skip(330) {
                table.insert((a.asset_id.clone(), *d), CpdFeatures { score: t as f64 / 1000.0, location_norm: 0.5 });
            }
        }
        let frame = build_features(&p, Some(&table)).unwrap();
        assert_eq!(frame.dates[0], p.dates()[330]);
        assert_eq!(frame.assets[1].rows[0].cpd.unwrap().score, 0.33);
        assert_eq!(frame.assets[0].rows[0].inputs(true).len(), CPD_FEATURES);
    }

    #[test]
    fn truncation_leaves_earlier_rows_unchanged() {
        let p = panel(520, 2);
        let full = build_features(&p, None).unwrap();
        for cut in [330usize, 401, 519] {
            let part = build_features(&p.truncate(p.dates()[cut]), None).unwrap();
            for (a, asset) in part.assets.iter().enumerate() {
                for (i, row) in asset.rows.iter().enumerate() {
                    let other = &full.assets[a].rows[i];
                    assert_eq!(part.dates[i], full.dates[i]);
                    let bits = |r: &FeatureRow| r.inputs(false).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    assert_eq!(bits(row), bits(other));
                    assert_eq!(row.ewma_vol.to_bits(), other.ewma_vol.to_bits());
                    if i + 1 < asset.rows.len() {
                        assert_eq!(row.next_return, other.next_return);
                    } else {
                        assert!(row.next_return.is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn feature_csv_round_trip() {
        let p = panel(420, 3);
        let frame = build_features(&p, None).unwrap();
        let mut buf = Vec::new();
        write_feature_csv(&frame, &mut buf).unwrap();
        assert_eq!(read_feature_csv(buf.as_slice()).unwrap(), frame);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn macd_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let closes = random_walk(seed, 380);
            let scaled: Vec<f64> = closes.iter().map(|c| c * scale).collect();
            for (s, l) in MACD_TIMESCALES {
                let a = macd_signal(&closes, s, l).unwrap();
                let b = macd_signal(&scaled, s, l).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    if let (Some(x), Some(y)) = (x, y) {
                        prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12));
                    }
                }
            }
        }

        #[test]
        fn features_stay_finite_on_flat_stretches(flat_from in 100usize..300, seed in 0u64..100) {
            let mut closes = random_walk(seed, 420);
            let level = closes[flat_from];
            for c in closes.iter_mut().skip(flat_from) {
                *c = level;
            }
            let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
            let dates = (0..420u64).map(|i| start + chrono::Days::new(i)).collect();
            let metas = vec![
                AssetMeta { asset_id: "A".into(), ticker: "A".into(), sector: SectorGroup::Mining },
                AssetMeta { asset_id: "B".into(), ticker: "B".into(), sector: SectorGroup::Retail },
            ];
            let p = PricePanel::new(dates, metas, vec![closes.clone(), closes]).unwrap();
            let frame = build_features(&p, None).unwrap();
            for row in &frame.assets[0].rows {
                prop_assert!(row.inputs(false).iter().all(|v| v.is_finite()));
            }
        }
    }
}
