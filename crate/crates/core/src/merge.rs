//! Parameter-space merging of trajectory checkpoints.
//!
//! A merged model is `theta* = sum_t alpha_t theta_t` with
//! `alpha = softmax(w)`. The raw logits `w` are learned by minimizing a
//! reference-free preference loss on the merged model minus `lambda` times
//! the entropy of `alpha`; the checkpoints themselves stay frozen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceExample;
use crate::dpo::ensure_same_spec;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamW, OptimizerState};
use crate::policy::{accumulate_log_prob_grad, PolicyCheckpoint};
use crate::scalar::{count, sigmoid, softplus, Scalar};
use crate::seed;

/// Ordered checkpoints sharing one model spec, iteration indices strictly
/// increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S = f64> {
    checkpoints: Vec<PolicyCheckpoint<S>>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new(checkpoints: Vec<PolicyCheckpoint<S>>) -> Result<Self> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::Input("trajectory is empty".into()))?;
        for c in &checkpoints[1..] {
            ensure_same_spec(first, c)?;
        }
        if checkpoints
            .windows(2)
            .any(|w| w[0].iteration_index() >= w[1].iteration_index())
        {
            return Err(Error::Input(
                "trajectory iteration indices must strictly increase".into(),
            ));
        }
        Ok(Trajectory { checkpoints })
    }

    pub fn checkpoints(&self) -> &[PolicyCheckpoint<S>] {
        &self.checkpoints
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn last(&self) -> &PolicyCheckpoint<S> {
        self.checkpoints.last().expect("trajectory is nonempty")
    }

    pub fn first(&self) -> &PolicyCheckpoint<S> {
        &self.checkpoints[0]
    }

    pub fn push(&mut self, ckpt: PolicyCheckpoint<S>) -> Result<()> {
        ensure_same_spec(self.first(), &ckpt)?;
        if ckpt.iteration_index() <= self.last().iteration_index() {
            return Err(Error::Input(
                "trajectory iteration indices must strictly increase".into(),
            ));
        }
        self.checkpoints.push(ckpt);
        Ok(())
    }
}

/// Raw logits `w`; `alpha` is always derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights<S = f64> {
    raw: Vec<S>,
}

impl<S: Scalar> MergeWeights<S> {
    pub fn new(raw: Vec<S>) -> Result<Self> {
        softmax_weights(&raw)?;
        Ok(MergeWeights { raw })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![S::zero(); n])
    }

    pub fn raw(&self) -> &[S] {
        &self.raw
    }

    pub fn alpha(&self) -> Vec<S> {
        softmax_weights(&self.raw).expect("raw weights validated at construction")
    }
}

/// Max-subtracted softmax.
pub fn softmax_weights<S: Scalar>(raw: &[S]) -> Result<Vec<S>> {
    if raw.is_empty() {
        return Err(Error::Input("merge weight vector is empty".into()));
    }
    if raw.iter().any(|w| !w.is_finite()) {
        return Err(Error::Input("merge weights must be finite".into()));
    }
    let m = raw.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = raw.iter().map(|&w| (w - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// `-sum alpha_t ln alpha_t`, with `0 ln 0 = 0`.
pub fn entropy<S: Scalar>(alpha: &[S]) -> S {
    alpha.iter().filter(|&&a| a > S::zero()).map(|&a| -a * a.ln()).sum()
}

fn check_simplex<S: Scalar>(alpha: &[S], n: usize) -> Result<()> {
    if alpha.len() != n {
        return Err(Error::Input(format!("{} weights for {n} checkpoints", alpha.len())));
    }
    let tol = 1e-9;
    let total: f64 = alpha.iter().map(|a| a.to_f64_lossy()).sum();
    if alpha.iter().any(|a| a.is_nan() || a.to_f64_lossy() < -tol) || (total - 1.0).abs() > tol {
        return Err(Error::Input(format!("merge weights are off the simplex (sum {total})")));
    }
    Ok(())
}

/// Coordinate-wise convex combination of the trajectory.
///
/// Each coordinate sums its weighted terms in ascending order, so the result
/// does not depend on the order of the trajectory.
pub fn merge_checkpoints<S: Scalar>(traj: &Trajectory<S>, alpha: &[S]) -> Result<PolicyCheckpoint<S>> {
    check_simplex(alpha, traj.len())?;
    let last = traj.last();
    let len = last.params().len();
    let mut terms = Vec::with_capacity(traj.len());
    let params = (0..len)
        .map(|i| {
            terms.clear();
            terms.extend(traj.checkpoints.iter().zip(alpha).map(|(c, &a)| a * c.params()[i]));
            terms.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            terms.iter().fold(S::zero(), |acc, &t| acc + t)
        })
        .collect();
    last.with_params(params, last.iteration_index(), "merged")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightInit {
    Zeros,
    SeededNormal { stddev: f64 },
}

/// Which pairs train the merge weights inside the iterative loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightDataSource {
    /// The current round's training pairs, after noise.
    CurrentRoundTrain,
    /// Clean pairs on a reserved prompt slice sized `fraction` of the pool.
    HeldOutSplit { fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightLearnConfig {
    pub beta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub w_init: WeightInit,
    pub seed: u64,
    pub dataset_source: WeightDataSource,
}

impl Default for WeightLearnConfig {
    fn default() -> Self {
        WeightLearnConfig {
            beta: 0.1,
            lambda: 0.1,
            steps: 200,
            learning_rate: 0.05,
            w_init: WeightInit::Zeros,
            seed: 0,
            dataset_source: WeightDataSource::CurrentRoundTrain,
        }
    }
}

impl WeightLearnConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::validation(format!("{prefix}.{field}"), reason));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be >= 0");
        }
        if self.steps < 1 {
            return bad("steps", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if let WeightDataSource::HeldOutSplit { fraction } = self.dataset_source {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return bad("dataset_source.fraction", "must be in (0, 1]");
            }
        }
        Ok(())
    }
}

/// Loss terms of the weight objective at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightObjective<S = f64> {
    /// `L_pref - lambda * H(alpha)`.
    pub loss: S,
    pub preference_loss: S,
    pub entropy: S,
    pub grad_w: Vec<S>,
}

/// Weight objective and its exact gradient with respect to the raw logits.
pub fn weight_objective_and_grad<S: Scalar>(
    traj: &Trajectory<S>,
    raw_w: &[S],
    batch: &[PreferenceExample],
    beta: f64,
    lambda: f64,
) -> Result<WeightObjective<S>> {
    if batch.is_empty() {
        return Err(Error::Input("empty weight-learning batch".into()));
    }
    if raw_w.len() != traj.len() {
        return Err(Error::Input(format!(
            "{} weights for {} checkpoints",
            raw_w.len(),
            traj.len()
        )));
    }
    let alpha = softmax_weights(raw_w)?;
    let merged = merge_checkpoints(traj, &alpha)?;
    let beta = S::of(beta);
    let lambda = S::of(lambda);
    let len = merged.params().len();

    let terms = batch
        .par_iter()
        .map(|ex| {
            let mut g = vec![S::zero(); len];
            let lp_w = accumulate_log_prob_grad(&merged, &ex.prompt, &ex.chosen, S::one(), &mut g)?;
            let lp_l = accumulate_log_prob_grad(&merged, &ex.prompt, &ex.rejected, -S::one(), &mut g)?;
            let z = beta * (lp_w - lp_l);
            let coef = -sigmoid(-z) * beta;
            for x in g.iter_mut() {
                *x *= coef;
            }
            Ok((softplus(-z), g))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = count::<S>(terms.len());
    let mut pref = S::zero();
    let mut grad_theta = vec![S::zero(); len];
    for (l, g) in terms {
        pref += l;
        for (acc, x) in grad_theta.iter_mut().zip(g) {
            *acc += x;
        }
    }
    pref /= n;
    for g in grad_theta.iter_mut() {
        *g /= n;
    }

    // dL/dalpha_t = theta_t . dL/dtheta*
    let grad_alpha: Vec<S> = traj
        .checkpoints
        .iter()
        .map(|c| c.params().iter().zip(&grad_theta).map(|(&p, &g)| p * g).sum())
        .collect();
    let mean_g: S = alpha.iter().zip(&grad_alpha).map(|(&a, &g)| a * g).sum();
    let alpha_log = |a: S| if a > S::zero() { a * a.ln() } else { S::zero() };
    let mean_log: S = alpha.iter().map(|&a| alpha_log(a)).sum();
    let h = -mean_log;

    let grad_w = alpha
        .iter()
        .zip(&grad_alpha)
        .map(|(&a, &g)| {
            let pref_part = a * (g - mean_g);
            // dH/dw_t = -alpha_t (ln alpha_t - sum_s alpha_s ln alpha_s)
            let dh = -(alpha_log(a) - a * mean_log);
            pref_part - lambda * dh
        })
        .collect();

    Ok(WeightObjective {
        loss: pref - lambda * h,
        preference_loss: pref,
        entropy: h,
        grad_w,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedWeights<S = f64> {
    pub weights: MergeWeights<S>,
    /// Total objective before each step.
    pub loss_trace: Vec<S>,
    /// Preference loss of the final weights.
    pub final_preference_loss: S,
}

/// Full-batch Adam descent on the weight objective; only `w` moves.
pub fn learn_weights<S: Scalar>(
    traj: &Trajectory<S>,
    dataset: &[PreferenceExample],
    cfg: &WeightLearnConfig,
) -> Result<LearnedWeights<S>> {
    if dataset.is_empty() {
        return Err(Error::Input("weight-learning dataset is empty".into()));
    }
    let n = traj.len();
    let mut w: Vec<S> = match cfg.w_init {
        WeightInit::Zeros => vec![S::zero(); n],
        WeightInit::SeededNormal { stddev } => {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, stddev).map_err(|e| Error::Config(format!("w_init: {e}")))?;
            let mut rng = seed::rng(cfg.seed);
            (0..n).map(|_| S::of(normal.sample(&mut rng))).collect()
        }
    };
    let opt = AdamW::new(cfg.learning_rate);
    let mut state = OptimizerState::new(n);
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let obj = weight_objective_and_grad(traj, &w, dataset, cfg.beta, cfg.lambda)?;
        loss_trace.push(obj.loss);
        adamw_step(&mut w, &obj.grad_w, &mut state, &opt, cfg.steps as u64)?;
    }
    let final_obj = weight_objective_and_grad(traj, &w, dataset, cfg.beta, cfg.lambda)?;
    Ok(LearnedWeights {
        weights: MergeWeights::new(w)?,
        loss_trace,
        final_preference_loss: final_obj.preference_loss,
    })
}
