//! Constructions shared by the integration and acceptance tests.

#![allow(dead_code)]

use rand::Rng;
use tpmm::config::{ExperimentConfig, StrategyKind};
use tpmm::data::PreferenceExample;
use tpmm::policy::{build_model, log_prob, Init, ModelSpec, PolicyCheckpoint, Prompt, Response, Token, EOS};
use tpmm::scalar::softplus;
use tpmm::seed;
use tpmm::{Checkpoint, Trajectory};

/// Relative error with a floor on the denominator, so that near-zero
/// gradient entries are compared in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_tokens(rng: &mut impl Rng, v: usize, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(1..v as Token)).collect()
}

pub fn random_response(rng: &mut impl Rng, v: usize, max_content: usize) -> Response {
    let len = rng.random_range(0..=max_content);
    let mut t = random_tokens(rng, v, len);
    t.push(EOS);
    Response::new(t).unwrap()
}

/// Random preference pairs whose chosen and rejected sequences differ.
pub fn random_pairs(rng: &mut impl Rng, v: usize, n: usize, max_content: usize) -> Vec<PreferenceExample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let plen = rng.random_range(0..3);
        let prompt = Prompt::new(random_tokens(rng, v, plen)).unwrap();
        let c = random_response(rng, v, max_content);
        let r = random_response(rng, v, max_content);
        if c != r {
            out.push(PreferenceExample::new(prompt, c, r).unwrap());
        }
    }
    out
}

/// A random small spec of either family.
pub fn random_spec(rng: &mut impl Rng, tiny: bool) -> ModelSpec {
    let v = rng.random_range(3..=6);
    if tiny {
        ModelSpec::tiny(
            v,
            rng.random_range(1..=3),
            rng.random_range(2..=4),
            rng.random_range(2..=5),
            6,
        )
    } else {
        ModelSpec::tabular(v, 6)
    }
}

pub fn random_model(spec: ModelSpec, seed: u64) -> Checkpoint {
    build_model(spec, Init::SeededNormal { stddev: 0.7 }, seed).unwrap()
}

pub fn random_trajectory(rng: &mut impl Rng, spec: ModelSpec, len: usize) -> Trajectory {
    let ckpts = (0..len)
        .map(|i| random_model(spec, rng.random()).relabeled(i as u32, "random"))
        .collect();
    Trajectory::new(ckpts).unwrap()
}

/// Reference-free preference loss `mean softplus(-beta (lp_w - lp_l))`.
pub fn preference_loss(model: &PolicyCheckpoint, data: &[PreferenceExample], beta: f64) -> f64 {
    data.iter()
        .map(|ex| {
            let z = beta
                * (log_prob(model, &ex.prompt, &ex.chosen).unwrap()
                    - log_prob(model, &ex.prompt, &ex.rejected).unwrap());
            softplus(-z)
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Two tabular checkpoints and a corpus on which A ranks every pair
/// correctly and B = -A ranks every pair wrongly.
///
/// Chosen responses repeat token 1, rejected ones repeat token 2 with the
/// same length; every row of A scores token 1 above token 2.
pub fn ab_construction(n: usize, seed: u64) -> (Trajectory, Vec<PreferenceExample>) {
    let v = 4;
    let spec = ModelSpec::tabular(v, 6);
    let row = [0.0, 1.0, -1.0, 0.5];
    let a: Vec<f64> = (0..v).flat_map(|_| row).collect();
    let b: Vec<f64> = a.iter().map(|x| -x).collect();
    let traj = Trajectory::new(vec![
        PolicyCheckpoint::new(spec, a, 0, "A").unwrap(),
        PolicyCheckpoint::new(spec, b, 1, "B").unwrap(),
    ])
    .unwrap();
    let mut rng = seed::rng(seed);
    let data = (0..n)
        .map(|_| {
            let plen = rng.random_range(1..3);
            let prompt = Prompt::new(random_tokens(&mut rng, v, plen)).unwrap();
            let len = rng.random_range(1..5);
            let mut c = vec![1; len];
            let mut r = vec![2; len];
            c.push(EOS);
            r.push(EOS);
            PreferenceExample::new(prompt, Response::new(c).unwrap(), Response::new(r).unwrap()).unwrap()
        })
        .collect();
    (traj, data)
}

/// Desk-scale noise-robustness experiment config.
pub fn desk_config(master_seed: u64, strategy: StrategyKind, noise_p: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default();
    cfg.master_seed = master_seed;
    cfg.strategy = strategy;
    cfg.per_round.noise_p = noise_p;
    cfg.run_id = format!("{}_p{noise_p}_s{master_seed}", strategy.name());
    cfg
}

/// A quick tabular config for structural tests.
pub fn small_config(master_seed: u64, strategy: StrategyKind, rounds: usize) -> ExperimentConfig {
    let mut cfg =
        ExperimentConfig::from_toml("[model]\nfamily = \"tabular_bigram\"\nvocab_size = 6\nmax_response_len = 5\n")
            .unwrap();
    cfg.master_seed = master_seed;
    cfg.strategy = strategy;
    cfg.rounds = rounds;
    cfg.sft.examples = 40;
    cfg.per_round.pairs = 40;
    cfg.per_round.dpo.epochs = 2;
    cfg.eval.n_prompts_id = 30;
    cfg.eval.n_prompts_ood = 30;
    cfg.weights.steps = 50;
    cfg
}
