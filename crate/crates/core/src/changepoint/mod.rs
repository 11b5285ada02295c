//! Changepoint scores from Gaussian-process fits over trailing return
//! windows.
//!
//! Each window is standardized, then fitted twice: once with a single
//! Matérn 3/2 kernel and once with a changepoint kernel that switches
//! between two Matérn 3/2 kernels through a sigmoid. The score measures how
//! much the switch improves the negative log marginal likelihood, and the
//! fitted switch position gives the location.
//!
//! ```
//! use momentum_transformer::changepoint::detect_changepoint;
//! use rand::SeedableRng;
//!
//! let mut window = vec![0.0; 21];
//! for (i, w) in window.iter_mut().enumerate() {
//!     *w = if i < 10 { 0.01 * (i as f64).sin() } else { 0.05 + 0.01 * (i as f64).cos() };
//! }
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
//! let date = chrono::NaiveDate::from_ymd_opt(2020, 1, 31).unwrap();
//! let rec = detect_changepoint(&window, 21, date, 40, &mut rng).unwrap();
//! assert!((rec.cp_location as i64 - 30).abs() <= 2);
//! assert!(rec.cp_score > 0.0 && rec.cp_score <= 1.0);
//! ```

mod gp;
mod optimize;

pub use gp::{covariance, gp_nlml, Kernel, KernelKind, Matern32, JITTER_LADDER};
pub use optimize::{Minimum, NelderMead};

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{CpdFeatures, CpdTable};
use crate::market_data::PricePanel;

pub const DEFAULT_LOOKBACK: usize = 21;
pub const MIN_LOOKBACK: usize = 5;
pub const N_STARTS: usize = 8;
pub const PLAIN_MAX_EVALS: usize = 300;
pub const CHANGEPOINT_MAX_EVALS: usize = 600;
pub const F_TOL: f64 = 1e-6;
pub const STD_FLOOR: f64 = 1e-8;

const LENGTH_SCALE_BOUNDS: (f64, f64) = (1.0, 100.0);
const VARIANCE_BOUNDS: (f64, f64) = (1e-4, 10.0);
const STEEPNESS_BOUNDS: (f64, f64) = (0.1, 50.0);
/// Switch positions may sit slightly outside the grid so that a
/// changepoint kernel can reduce to a single kernel.
const LOCATION_MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpFit {
    pub kernel: Kernel,
    pub noise: f64,
    pub nlml: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangepointRecord {
    pub date: NaiveDate,
    pub t: usize,
    pub cp_location: usize,
    pub cp_location_norm: f64,
    pub cp_score: f64,
}

struct Space {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Space {
    fn new(kind: KernelKind, n: usize) -> Space {
        let (v, l, s) = (VARIANCE_BOUNDS, LENGTH_SCALE_BOUNDS, STEEPNESS_BOUNDS);
        let ln = |b: (f64, f64)| (b.0.ln(), b.1.ln());
        let mut bounds = vec![ln(v), ln(l)];
        if kind == KernelKind::Changepoint {
            bounds.extend([ln(v), ln(l)]);
        }
        bounds.push(ln(v));
        if kind == KernelKind::Changepoint {
            bounds.push((-LOCATION_MARGIN, n as f64 - 1.0 + LOCATION_MARGIN));
            bounds.push(ln(s));
        }
        Space { lower: bounds.iter().map(|b| b.0).collect(), upper: bounds.iter().map(|b| b.1).collect() }
    }

    fn decode(kind: KernelKind, p: &[f64]) -> (Kernel, f64) {
        let m = |a: f64, l: f64| Matern32 { amplitude: a.exp(), length_scale: l.exp() };
        match kind {
            KernelKind::Matern32 => (Kernel::Matern32(m(p[0], p[1])), p[2].exp()),
            KernelKind::Changepoint => (
                Kernel::Changepoint { before: m(p[0], p[1]), after: m(p[2], p[3]), location: p[5], steepness: p[6].exp() },
                p[4].exp(),
            ),
        }
    }

    fn encode(kernel: &Kernel, noise: f64) -> Vec<f64> {
        match kernel {
            Kernel::Matern32(m) => vec![m.amplitude.ln(), m.length_scale.ln(), noise.ln()],
            Kernel::Changepoint { before, after, location, steepness } => vec![
                before.amplitude.ln(),
                before.length_scale.ln(),
                after.amplitude.ln(),
                after.length_scale.ln(),
                noise.ln(),
                *location,
                steepness.ln(),
            ],
        }
    }

    /// Start `k` of [`N_STARTS`]: uniform in the box, with the switch
    /// location stratified across the window.
    fn start(&self, kind: KernelKind, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p: Vec<f64> = self.lower.iter().zip(&self.upper).map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect();
        if kind == KernelKind::Changepoint {
            let (lo, hi) = (self.lower[5], self.upper[5]);
            p[5] = lo + (hi - lo) * (k as f64 + rng.gen::<f64>()) / N_STARTS as f64;
        }
        p
    }
}

fn fit_from_starts(y: &[f64], kind: KernelKind, starts: Vec<Vec<f64>>, max_evals: usize) -> Result<GpFit> {
    let space = Space::new(kind, y.len());
    let step: Vec<f64> = space.lower.iter().zip(&space.upper).map(|(lo, hi)| 0.15 * (hi - lo)).collect();
    let nm = NelderMead { max_evals, f_tol: F_TOL };
    let objective = |p: &[f64]| {
        let (kernel, noise) = Space::decode(kind, p);
        gp_nlml(y, &kernel, noise).unwrap_or(f64::INFINITY)
    };
    let mut best: Option<Minimum> = None;
    for start in starts {
        let m = nm.minimize(objective, &start, &step, &space.lower, &space.upper);
        if m.value.is_finite() && best.as_ref().map_or(true, |b| m.value < b.value) {
            best = Some(m);
        }
    }
    let best = best.ok_or(Error::SingularKernel)?;
    let (kernel, noise) = Space::decode(kind, &best.x);
    Ok(GpFit { kernel, noise, nlml: best.value })
}

/// Fits `kind` to a standardized window from [`N_STARTS`] seeded starts.
pub fn fit_gp(window: &[f64], kind: KernelKind, rng: &mut ChaCha8Rng) -> Result<GpFit> {
    let space = Space::new(kind, window.len());
    let starts = (0..N_STARTS).map(|k| space.start(kind, k, rng)).collect();
    let max_evals = match kind {
        KernelKind::Matern32 => PLAIN_MAX_EVALS,
        KernelKind::Changepoint => CHANGEPOINT_MAX_EVALS,
    };
    fit_from_starts(window, kind, starts, max_evals)
}

/// Changepoint fit whose starts include `plain` embedded as a degenerate
/// changepoint kernel (switch beyond the window end), so the result never
/// has a higher NLML than `plain`.
pub fn fit_changepoint(window: &[f64], plain: &GpFit, rng: &mut ChaCha8Rng) -> Result<GpFit> {
    let Kernel::Matern32(m) = plain.kernel else {
        return Err(Error::Contract("changepoint fit needs a plain Matérn fit".into()));
    };
    let space = Space::new(KernelKind::Changepoint, window.len());
    let mut starts: Vec<Vec<f64>> = (0..N_STARTS).map(|k| space.start(KernelKind::Changepoint, k, rng)).collect();
    let degenerate = Kernel::Changepoint {
        before: m,
        after: m,
        location: space.upper[5],
        steepness: STEEPNESS_BOUNDS.1,
    };
    starts.push(Space::encode(&degenerate, plain.noise));
    fit_from_starts(window, KernelKind::Changepoint, starts, CHANGEPOINT_MAX_EVALS)
}

/// Subtracts the mean and divides by the sample standard deviation;
/// `None` when the deviation is below [`STD_FLOOR`].
pub fn standardize(window: &[f64]) -> Option<Vec<f64>> {
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let std = (window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (std >= STD_FLOOR).then(|| window.iter().map(|v| (v - mean) / std).collect())
}

/// Relative NLML improvement of the changepoint fit, clamped to `[0, 1]`.
///
/// Equals `1 - cp / max(cp, plain)` when both values are positive; the
/// absolute value in the denominator keeps it monotone otherwise.
pub fn changepoint_score(nlml_cp: f64, nlml_plain: f64) -> f64 {
    let scale = nlml_cp.abs().max(nlml_plain.abs());
    if scale == 0.0 {
        return 0.0;
    }
    ((nlml_plain - nlml_cp) / scale).clamp(0.0, 1.0)
}

/// Scores the window of `lookback` returns ending at time index `t`.
pub fn detect_changepoint(
    window: &[f64],
    lookback: usize,
    date: NaiveDate,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ChangepointRecord> {
    if lookback < MIN_LOOKBACK || window.len() != lookback || t + 1 < lookback {
        return Err(Error::Contract(format!(
            "changepoint window of {} values, lookback {lookback}, t {t}",
            window.len()
        )));
    }
    let first = t + 1 - lookback;
    let Some(y) = standardize(window) else {
        return Ok(ChangepointRecord { date, t, cp_location: t, cp_location_norm: 0.0, cp_score: 0.0 });
    };
    let plain = fit_gp(&y, KernelKind::Matern32, rng)?;
    let cp = fit_changepoint(&y, &plain, rng)?;
    let Kernel::Changepoint { location, .. } = cp.kernel else { unreachable!() };
    let offset = location.round().clamp(0.0, (lookback - 1) as f64) as usize;
    let cp_location = first + offset;
    Ok(ChangepointRecord {
        date,
        t,
        cp_location,
        cp_location_norm: (t - cp_location) as f64 / lookback as f64,
        cp_score: changepoint_score(cp.nlml, plain.nlml),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpdConfig {
    pub lookback: usize,
    pub seed: u64,
}

impl Default for CpdConfig {
    fn default() -> Self {
        CpdConfig { lookback: DEFAULT_LOOKBACK, seed: 42 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssetChangepoints {
    pub asset_id: String,
    pub records: Vec<ChangepointRecord>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Generator seed for one `(asset, t)` task, independent of scheduling.
pub fn task_seed(global: u64, asset_id: &str, t: usize) -> u64 {
    splitmix64(global ^ splitmix64(fnv1a(asset_id) ^ splitmix64(t as u64)))
}

/// One record per asset and per date with a full window of `lookback`
/// returns behind it, i.e. time indices `lookback..n_dates`.
pub fn run_cpd(panel: &PricePanel, config: &CpdConfig) -> Result<Vec<AssetChangepoints>> {
    if config.lookback < MIN_LOOKBACK {
        return Err(Error::Config(format!("cpd lookback must be >= {MIN_LOOKBACK}")));
    }
    let returns: Vec<Vec<f64>> = (0..panel.n_assets())
        .map(|a| crate::features::simple_returns(panel.closes(a)))
        .collect::<Result<_>>()?;
    let lookback = config.lookback;
    let tasks: Vec<(usize, usize)> =
        (0..panel.n_assets()).flat_map(|a| (lookback..panel.n_dates()).map(move |t| (a, t))).collect();
    let records: Vec<ChangepointRecord> = tasks
        .par_iter()
        .map(|&(a, t)| {
            let asset_id = &panel.assets()[a].asset_id;
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(config.seed, asset_id, t));
            // returns[j] is dated j + 1.
            let window = &returns[a][t - lookback..t];
            detect_changepoint(window, lookback, panel.dates()[t], t, &mut rng)
        })
        .collect::<Result<_>>()?;
    let per_asset = panel.n_dates().saturating_sub(lookback);
    Ok(panel
        .assets()
        .iter()
        .enumerate()
        .map(|(a, meta)| AssetChangepoints {
            asset_id: meta.asset_id.clone(),
            records: records[a * per_asset..(a + 1) * per_asset].to_vec(),
        })
        .collect())
}

pub fn to_cpd_table(results: &[AssetChangepoints]) -> CpdTable {
    results
        .iter()
        .flat_map(|a| {
            a.records.iter().map(move |r| {
                ((a.asset_id.clone(), r.date), CpdFeatures { score: r.cp_score, location_norm: r.cp_location_norm })
            })
        })
        .collect()
}

pub const CPD_HEADER: [&str; 5] = ["date", "t", "cp_location", "cp_location_norm", "cp_score"];

pub fn write_cpd_csv<W: Write>(records: &[ChangepointRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CPD_HEADER)?;
    for r in records {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.t.to_string(),
            r.cp_location.to_string(),
            r.cp_location_norm.to_string(),
            r.cp_score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cpd_csv<R: Read>(reader: R) -> Result<Vec<ChangepointRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().collect::<Vec<_>>() != CPD_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", CPD_HEADER.join(",")) });
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let err = |m: String| Error::Parse { line, message: m };
            Ok(ChangepointRecord {
                date: NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| err(e.to_string()))?,
                t: rec[1].parse().map_err(|e| err(format!("t: {e}")))?,
                cp_location: rec[2].parse().map_err(|e| err(format!("cp_location: {e}")))?,
                cp_location_norm: rec[3].parse().map_err(|e| err(format!("cp_location_norm: {e}")))?,
                cp_score: rec[4].parse().map_err(|e| err(format!("cp_score: {e}")))?,
            })
        })
        .collect()
}

pub fn cpd_file_name(asset_id: &str) -> String {
    format!("cpd_{asset_id}.csv")
}

/// Writes one `cpd_<asset_id>.csv` per asset into `dir`.
pub fn save_cpd_dir(results: &[AssetChangepoints], dir: impl AsRef<Path>) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    for a in results {
        write_cpd_csv(&a.records, std::fs::File::create(dir.as_ref().join(cpd_file_name(&a.asset_id)))?)?;
    }
    Ok(())
}

pub fn load_cpd_dir<'a>(
    dir: impl AsRef<Path>,
    asset_ids: impl IntoIterator<Item = &'a str>,
) -> Result<Vec<AssetChangepoints>> {
    asset_ids
        .into_iter()
        .map(|id| {
            let path = dir.as_ref().join(cpd_file_name(id));
            let file = std::fs::File::open(&path)
                .map_err(|e| Error::MissingFeature(format!("changepoint file {}: {e}", path.display())))?;
            Ok(AssetChangepoints { asset_id: id.to_string(), records: read_cpd_csv(file)? })
        })
        .collect()
}
