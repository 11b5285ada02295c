use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::momentum_model::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments, one slot per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update. Grads are checked before anything is modified, so a
/// failed step leaves params and state untouched.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, learning_rate: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", &[p.shape(), g.shape()]));
        }
        if !g.is_finite() {
            return Err(Error::Numeric { block: format!("gradient of {name}") });
        }
    }
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p.values_mut().iter_mut().zip(g.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *w -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
