//! Gaussian-process marginal likelihood on the integer grid `0..n`.

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Diagonal jitter tried in order when the covariance is not numerically
/// positive definite.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matern32 {
    pub amplitude: f64,
    pub length_scale: f64,
}

impl Matern32 {
    pub fn eval(&self, distance: f64) -> f64 {
        let z = SQRT3 * distance / self.length_scale;
        self.amplitude * (1.0 + z) * (-z).exp()
    }

    /// Values at distances `0..n`; on a unit grid these are all the kernel
    /// ever needs.
    fn table(&self, n: usize) -> Vec<f64> {
        (0..n).map(|d| self.eval(d as f64)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Matern32,
    Changepoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Matern32(Matern32),
    /// `(1 - s(x))(1 - s(x')) k_before + s(x) s(x') k_after` with
    /// `s(x) = sigmoid(steepness * (x - location))`.
    Changepoint {
        before: Matern32,
        after: Matern32,
        location: f64,
        steepness: f64,
    },
}

impl Kernel {
    pub fn kind(&self) -> KernelKind {
        match self {
            Kernel::Matern32(_) => KernelKind::Matern32,
            Kernel::Changepoint { .. } => KernelKind::Changepoint,
        }
    }

    fn is_valid(&self) -> bool {
        let ok = |m: &Matern32| m.amplitude > 0.0 && m.length_scale > 0.0;
        match self {
            Kernel::Matern32(m) => ok(m),
            Kernel::Changepoint { before, after, location, steepness } => {
                ok(before) && ok(after) && location.is_finite() && steepness.is_finite()
            }
        }
    }
}

fn switch(x: f64, location: f64, steepness: f64) -> f64 {
    let z = steepness * (x - location);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Lower triangle (diagonal included) of `K + diag * I`, row-major.
fn fill_lower(k: &mut [f64], n: usize, kernel: &Kernel, diag: f64) {
    match kernel {
        Kernel::Matern32(m) => {
            let table = m.table(n);
            for i in 0..n {
                for j in 0..=i {
                    k[i * n + j] = table[i - j];
                }
            }
        }
        Kernel::Changepoint { before, after, location, steepness } => {
            let (tb, ta) = (before.table(n), after.table(n));
            let s: Vec<f64> = (0..n).map(|i| switch(i as f64, *location, *steepness)).collect();
            for i in 0..n {
                for j in 0..=i {
                    let d = i - j;
                    k[i * n + j] = (1.0 - s[i]) * (1.0 - s[j]) * tb[d] + s[i] * s[j] * ta[d];
                }
            }
        }
    }
    for i in 0..n {
        k[i * n + i] += diag;
    }
}

/// Dense `n x n` covariance `K + noise * I`, row-major.
pub fn covariance(n: usize, kernel: &Kernel, noise: f64) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    fill_lower(&mut k, n, kernel, noise);
    for i in 0..n {
        for j in i + 1..n {
            k[i * n + j] = k[j * n + i];
        }
    }
    k
}

/// In-place lower Cholesky factor; `false` if a pivot is not positive.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let (head, tail) = a.split_at_mut(j * n + n);
        let (rj, pivot) = head[j * n..].split_at_mut(j);
        let rj = &*rj;
        let d = pivot[0] - rj.iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        pivot[0] = d;
        for i in j + 1..n {
            let off = (i - j - 1) * n;
            let ri = &mut tail[off..off + j + 1];
            let s = ri[j] - ri[..j].iter().zip(rj).map(|(a, b)| a * b).sum::<f64>();
            ri[j] = s / d;
        }
    }
    true
}

/// Negative log marginal likelihood of `y` under a zero-mean GP:
/// `0.5 y'(K + noise I)^-1 y + 0.5 log|K + noise I| + 0.5 n log 2 pi`.
pub fn gp_nlml(y: &[f64], kernel: &Kernel, noise: f64) -> Result<f64> {
    if !kernel.is_valid() || !(noise > 0.0) {
        return Err(Error::InvalidSeries(format!("changepoint: invalid hyperparameters {kernel:?}, noise {noise}")));
    }
    let n = y.len();
    let mut l = vec![0.0; n * n];
    let mut alpha = vec![0.0; n];
    for jitter in JITTER_LADDER {
        fill_lower(&mut l, n, kernel, noise + jitter);
        if !cholesky(&mut l, n) {
            continue;
        }
        // Forward substitution: L a = y, so y'K^-1 y = |a|^2.
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for i in 0..n {
            let row = &l[i * n..i * n + i];
            let s = y[i] - row.iter().zip(&alpha[..i]).map(|(a, b)| a * b).sum::<f64>();
            alpha[i] = s / l[i * n + i];
            quad += alpha[i] * alpha[i];
            log_det += l[i * n + i].ln();
        }
        let nlml = 0.5 * quad + log_det + 0.5 * n as f64 * LN_2PI;
        if nlml.is_finite() {
            return Ok(nlml);
        }
    }
    Err(Error::SingularKernel)
}
