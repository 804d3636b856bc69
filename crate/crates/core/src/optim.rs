//! AdamW with bias correction, decoupled weight decay, optional linear
//! warmup and cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    CosineAnneal { min_fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_fraction: f64,
}

impl AdamW {
    pub fn new(learning_rate: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            warmup_fraction: 0.0,
        }
    }

    /// Learning-rate multiplier at 0-based `step`.
    pub fn lr_factor(&self, step: u64, total_steps: u64) -> Result<f64> {
        let mut factor = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::CosineAnneal { min_fraction } => {
                if total_steps < 1 {
                    return Err(Error::Config("cosine schedule needs total_steps >= 1".into()));
                }
                let progress = (step.min(total_steps) as f64) / total_steps as f64;
                min_fraction + (1.0 - min_fraction) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
            }
        };
        let warmup = (self.warmup_fraction * total_steps as f64).ceil() as u64;
        if step < warmup {
            factor *= (step + 1) as f64 / warmup as f64;
        }
        Ok(factor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S = f64> {
    pub step: u64,
    pub first_moment: Vec<S>,
    pub second_moment: Vec<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            step: 0,
            first_moment: vec![S::zero(); len],
            second_moment: vec![S::zero(); len],
        }
    }
}

/// One AdamW update of `params` in place.
pub fn adamw_step<S: Scalar>(
    params: &mut [S],
    grad: &[S],
    state: &mut OptimizerState<S>,
    opt: &AdamW,
    total_steps: u64,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.first_moment.len() {
        return Err(Error::Input(format!(
            "length mismatch: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    let lr = S::of(opt.learning_rate * opt.lr_factor(state.step, total_steps)?);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(opt.beta1), S::of(opt.beta2));
    let bias1 = S::one() - b1.powi(t);
    let bias2 = S::one() - b2.powi(t);
    let eps = S::of(opt.eps);
    let decay = S::one() - lr * S::of(opt.weight_decay);
    for i in 0..params.len() {
        let g = grad[i];
        let m = &mut state.first_moment[i];
        *m = b1 * *m + (S::one() - b1) * g;
        let v = &mut state.second_moment[i];
        *v = b2 * *v + (S::one() - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
