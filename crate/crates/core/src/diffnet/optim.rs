use std::f64::consts::PI;

use super::params::{ParamStore, Tensor};
use crate::error::{MadlError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// AdamW moment accumulators plus schedule bookkeeping.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, base_lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            base_lr,
            weight_decay,
            total_steps: total_steps.max(1),
        }
    }
}

/// One decoupled-weight-decay Adam update using the gradients stored in
/// `store`, at learning rate `lr`.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(MadlError::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);
    let decay = 1.0 - lr * state.weight_decay;

    for ((param, m), v) in store
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        if m.dim() != param.value.dim() {
            return Err(MadlError::Contract(format!(
                "moment shape {:?} does not match parameter '{}' {:?}",
                m.dim(),
                param.name,
                param.value.dim()
            )));
        }
        ndarray::Zip::from(&mut param.value)
            .and(&param.grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *p *= decay;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            });
    }
    Ok(())
}

/// Cosine-annealed learning rate: `base` at step 0, 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, base: f64) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}
