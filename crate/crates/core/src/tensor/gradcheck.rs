use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitude below which gradient comparisons switch from relative to
/// absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Leaf index and flat coordinate of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_error={:.3e} (tol {:.1e}) over {} coords",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.coordinates_checked
        )?;
        if let Some((leaf, coord)) = self.worst {
            write!(
                f,
                "; worst leaf {leaf}[{coord}] analytic={:.6e} numeric={:.6e}",
                self.worst_analytic, self.worst_numeric
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(leaves: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar loss, got {:?}", value.shape())));
    }
    Ok(value.values()[0])
}

/// Checks every coordinate of every leaf: the analytic gradient from
/// [`Tape::backward`] against `(f(x + h) - f(x - h)) / 2h`.
///
/// The error for one coordinate is `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn grad_check<F>(leaves: &[Tensor], build: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        passed: true,
        tolerance,
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").values().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let original = probe[li].values()[k];
            probe[li].values_mut()[k] = original + step;
            let plus = evaluate(&probe, &build)?;
            probe[li].values_mut()[k] = original - step;
            let minus = evaluate(&probe, &build)?;
            probe[li].values_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((li, k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
