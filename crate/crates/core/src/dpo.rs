//! SFT and DPO objectives with exact gradients, and single-stage training.
//!
//! Per example, DPO scores
//!
//! ```text
//! z = beta * [(log pi(y_w|x) - log ref(y_w|x)) - (log pi(y_l|x) - log ref(y_l|x))]
//! loss = -log sigmoid(z) = softplus(-z)
//! ```
//!
//! and the batch loss is the mean. The reference is a constant.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceExample;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamW, OptimizerState, Schedule};
use crate::policy::{accumulate_log_prob_grad, log_prob, PolicyCheckpoint, Prompt, Response};
use crate::scalar::{count, softplus, Scalar};
use crate::seed;

pub use crate::scalar::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            learning_rate: 1e-2,
            epochs: 1,
            batch_size: 8,
            schedule: Schedule::CosineAnneal { min_fraction: 0.0 },
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Learning rates customary for billion-parameter models. Far too small to
/// move the desk-scale policies here.
pub const LARGE_MODEL_SFT_LR: f64 = 5e-6;
pub const LARGE_MODEL_DPO_LR: f64 = 5e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Sft,
    Dpo,
}

impl DpoConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            schedule: self.schedule,
            warmup_fraction: self.warmup_fraction,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::validation(format!("{prefix}.{field}"), reason));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if self.epochs < 1 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if let Schedule::CosineAnneal { min_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&min_fraction) {
                return bad("schedule.min_fraction", "must be in [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta", "must be in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be > 0");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must be in [0, 1]");
        }
        Ok(())
    }
}

/// A supervised fine-tuning target.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub prompt: Prompt,
    pub response: Response,
}

pub(crate) fn ensure_same_spec<S: Scalar>(a: &PolicyCheckpoint<S>, b: &PolicyCheckpoint<S>) -> Result<()> {
    if a.spec() != b.spec() {
        return Err(Error::Config(format!(
            "policy and reference specs differ: {:?} vs {:?}",
            a.spec(),
            b.spec()
        )));
    }
    Ok(())
}

/// Sums per-example `(loss, grad)` terms in index order and divides by `n`.
fn mean_reduce<S: Scalar>(terms: Vec<(S, Vec<S>)>, len: usize) -> (S, Vec<S>) {
    let n = count::<S>(terms.len());
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); len];
    for (l, g) in terms {
        loss += l;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    (loss / n, grad)
}

/// Mean DPO loss over `batch` and its gradient with respect to the policy.
pub fn dpo_batch_loss_and_grad<S: Scalar>(
    policy: &PolicyCheckpoint<S>,
    reference: &PolicyCheckpoint<S>,
    batch: &[PreferenceExample],
    beta: f64,
) -> Result<(S, Vec<S>)> {
    ensure_same_spec(policy, reference)?;
    if batch.is_empty() {
        return Err(Error::Input("empty DPO batch".into()));
    }
    let beta = S::of(beta);
    let len = policy.params().len();
    let terms = batch
        .par_iter()
        .map(|ex| {
            let mut g = vec![S::zero(); len];
            let lp_w = accumulate_log_prob_grad(policy, &ex.prompt, &ex.chosen, S::one(), &mut g)?;
            let lp_l = accumulate_log_prob_grad(policy, &ex.prompt, &ex.rejected, -S::one(), &mut g)?;
            let ref_w = log_prob(reference, &ex.prompt, &ex.chosen)?;
            let ref_l = log_prob(reference, &ex.prompt, &ex.rejected)?;
            let z = beta * ((lp_w - ref_w) - (lp_l - ref_l));
            // d softplus(-z) / dz = -sigmoid(-z)
            let coef = -sigmoid(-z) * beta;
            for x in g.iter_mut() {
                *x *= coef;
            }
            Ok((softplus(-z), g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_reduce(terms, len))
}

/// Mean negative log-likelihood of the targets and its gradient.
pub fn sft_loss_and_grad<S: Scalar>(policy: &PolicyCheckpoint<S>, batch: &[SftExample]) -> Result<(S, Vec<S>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty SFT batch".into()));
    }
    let len = policy.params().len();
    let terms = batch
        .par_iter()
        .map(|ex| {
            let mut g = vec![S::zero(); len];
            let lp = accumulate_log_prob_grad(policy, &ex.prompt, &ex.response, -S::one(), &mut g)?;
            Ok((-lp, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_reduce(terms, len))
}

/// What a stage optimizes, with the data it needs.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a, S = f64> {
    Sft(&'a [SftExample]),
    Dpo {
        data: &'a [PreferenceExample],
        reference: &'a PolicyCheckpoint<S>,
    },
}

impl<S> Objective<'_, S> {
    fn kind(&self) -> ObjectiveKind {
        match self {
            Objective::Sft(_) => ObjectiveKind::Sft,
            Objective::Dpo { .. } => ObjectiveKind::Dpo,
        }
    }

    fn len(&self) -> usize {
        match self {
            Objective::Sft(d) => d.len(),
            Objective::Dpo { data, .. } => data.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput<S = f64> {
    pub checkpoint: PolicyCheckpoint<S>,
    /// Loss of every batch, evaluated before that batch's update.
    pub loss_trace: Vec<S>,
}

pub fn train_stage<S: Scalar>(
    init: &PolicyCheckpoint<S>,
    objective: Objective<'_, S>,
    cfg: &DpoConfig,
) -> Result<StageOutput<S>> {
    train_stage_observed(init, objective, cfg, |_, _| Ok(()))
}

/// Like [`train_stage`], calling `observe(step, params)` before the first
/// update (step 0) and after every update.
pub fn train_stage_observed<S: Scalar, F>(
    init: &PolicyCheckpoint<S>,
    objective: Objective<'_, S>,
    cfg: &DpoConfig,
    mut observe: F,
) -> Result<StageOutput<S>>
where
    F: FnMut(u64, &PolicyCheckpoint<S>) -> Result<()>,
{
    let n = objective.len();
    if n == 0 {
        return Err(Error::Input("training dataset is empty".into()));
    }
    if cfg.batch_size < 1 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if let Objective::Dpo { reference, .. } = objective {
        ensure_same_spec(init, reference)?;
    }
    let kind = objective.kind();
    let opt = cfg.optimizer();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;

    let mut policy = init.clone();
    let mut state = OptimizerState::new(policy.params().len());
    let mut loss_trace = Vec::with_capacity(total_steps as usize);
    observe(0, &policy)?;

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[epoch as u64])));
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grad) = match objective {
                Objective::Sft(data) => {
                    let batch: Vec<SftExample> = chunk.iter().map(|&i| data[i].clone()).collect();
                    sft_loss_and_grad(&policy, &batch)?
                }
                Objective::Dpo { data, reference } => {
                    let batch: Vec<PreferenceExample> = chunk.iter().map(|&i| data[i].clone()).collect();
                    dpo_batch_loss_and_grad(&policy, reference, &batch, cfg.beta)?
                }
            };
            let mut params = policy.into_params();
            adamw_step(&mut params, &grad, &mut state, &opt, total_steps)?;
            policy = PolicyCheckpoint::new(*init.spec(), params, init.iteration_index(), init.label())?;
            loss_trace.push(loss);
            observe(state.step, &policy)?;
        }
    }

    let (iteration, label) = match kind {
        ObjectiveKind::Sft => (0, "sft"),
        ObjectiveKind::Dpo => (init.iteration_index() + 1, "dpo"),
    };
    Ok(StageOutput {
        checkpoint: policy.relabeled(iteration, label),
        loss_trace,
    })
}
