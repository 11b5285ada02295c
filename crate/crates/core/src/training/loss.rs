use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Trading days per year.
pub const ANNUALIZATION: f64 = 252.0;

/// Variance guard in the Sharpe loss.
pub const SHARPE_EPS: f64 = 1e-9;

pub fn daily_vol_target(vol_target: f64) -> f64 {
    vol_target / ANNUALIZATION.sqrt()
}

/// Captured returns for one asset:
/// `z_t = x_t * L_t * r_{t+1} - cost * L_t * |x_t - x_{t-1}|` with leverage
/// `L_t = vol_target_daily / sigma_t`. The position before the first entry is
/// taken as `prev`.
pub fn captured_returns(
    positions: &[f64],
    next_returns: &[f64],
    vols: &[f64],
    vol_target: f64,
    cost_bp: f64,
    prev: f64,
) -> Result<Vec<f64>> {
    if positions.len() != next_returns.len() || positions.len() != vols.len() {
        return Err(Error::dim(
            "strategy_returns",
            &[&[positions.len()], &[next_returns.len()], &[vols.len()]],
        ));
    }
    let target = daily_vol_target(vol_target);
    let cost = cost_bp * 1e-4;
    let mut last = prev;
    Ok(positions
        .iter()
        .zip(next_returns)
        .zip(vols)
        .map(|((&x, &r), &s)| {
            let leverage = target / s;
            let z = x * leverage * r - cost * leverage * (x - last).abs();
            last = x;
            z
        })
        .collect())
}

/// Portfolio daily returns: per-asset captured returns averaged over assets.
/// Inputs are indexed `[asset][t]`; every asset starts flat.
pub fn strategy_returns(
    positions: &[Vec<f64>],
    next_returns: &[Vec<f64>],
    vols: &[Vec<f64>],
    vol_target: f64,
    cost_bp: f64,
) -> Result<Vec<f64>> {
    if positions.len() != next_returns.len() || positions.len() != vols.len() {
        return Err(Error::dim(
            "strategy_returns",
            &[&[positions.len()], &[next_returns.len()], &[vols.len()]],
        ));
    }
    let Some(first) = positions.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    let mut total = vec![0.0; n];
    for ((x, r), s) in positions.iter().zip(next_returns).zip(vols) {
        if x.len() != n {
            return Err(Error::dim("strategy_returns", &[&[n], &[x.len()]]));
        }
        for (acc, z) in total.iter_mut().zip(captured_returns(x, r, s, vol_target, cost_bp, 0.0)?) {
            *acc += z;
        }
    }
    let k = positions.len() as f64;
    Ok(total.into_iter().map(|z| z / k).collect())
}

/// Tape version of [`captured_returns`] for a `T x 1` position column. The
/// first row carries no turnover cost.
pub fn captured_returns_tape(
    tape: &mut Tape,
    positions: Var,
    next_returns: &[f64],
    vols: &[f64],
    vol_target: f64,
    cost_bp: f64,
) -> Result<Var> {
    let t = tape.value(positions).numel();
    if next_returns.len() != t || vols.len() != t {
        return Err(Error::dim("strategy_returns", &[&[t], &[next_returns.len()], &[vols.len()]]));
    }
    let target = daily_vol_target(vol_target);
    let leverage: Vec<f64> = vols.iter().map(|s| target / s).collect();
    let carry = Tensor::new(vec![t, 1], leverage.iter().zip(next_returns).map(|(l, r)| l * r).collect())?;
    let carry = tape.constant(carry);
    let gross = tape.mul(positions, carry)?;
    if cost_bp == 0.0 || t < 2 {
        return Ok(gross);
    }
    let cost = cost_bp * 1e-4;
    let now = tape.slice_rows(positions, 1, t - 1)?;
    let before = tape.slice_rows(positions, 0, t - 1)?;
    let diff = tape.sub(now, before)?;
    let turnover = tape.abs(diff);
    let weights = tape.constant(Tensor::new(vec![t - 1, 1], leverage[1..].iter().map(|l| l * cost).collect())?);
    let charged = tape.mul(turnover, weights)?;
    let zero = tape.constant(Tensor::zeros(&[1, 1]));
    let charges = tape.concat_rows(&[zero, charged])?;
    tape.sub(gross, charges)
}

/// `-sqrt(252) * mean / sqrt(var + eps)` with population variance.
pub fn sharpe_loss(tape: &mut Tape, returns: Var) -> Result<Var> {
    if tape.value(returns).numel() < 2 {
        return Err(Error::Contract("sharpe loss needs at least two returns".into()));
    }
    let mean = tape.mean_all(returns);
    let dev = tape.sub(returns, mean)?;
    let sq = tape.mul(dev, dev)?;
    let var = tape.mean_all(sq);
    let var = tape.offset(var, SHARPE_EPS);
    let denom = tape.sqrt(var);
    let ratio = tape.div(mean, denom)?;
    Ok(tape.scale(ratio, -ANNUALIZATION.sqrt()))
}

/// Value of the Sharpe loss without a tape, negated: the annualized Sharpe
/// with the same variance guard.
pub fn smoothed_sharpe(returns: &[f64]) -> f64 {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    ANNUALIZATION.sqrt() * mean / (var + SHARPE_EPS).sqrt()
}
