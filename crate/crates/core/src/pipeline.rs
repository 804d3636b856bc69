//! The multi-round experiment: SFT, then per round pair generation, noise,
//! reference selection, DPO and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataSchedule, ExperimentConfig, PolicyInit, StrategyKind};
use crate::data::{
    build_preference_pairs, generate_prompts, gold_reward, inject_label_noise, write_jsonl, GoldRewardModel, NoiseSpec,
    PreferenceExample, PromptDistribution,
};
use crate::dpo::{train_stage, train_stage_observed, DpoConfig, Objective, SftExample};
use crate::error::{Error, Result};
use crate::eval::{
    implicit_reward_margins, lc_win_rate, mean_gold_reward, mean_margins, win_rate, write_metrics_csv, MetricsRow,
};
use crate::merge::{
    learn_weights, merge_checkpoints, weight_objective_and_grad, LearnedWeights, MergeWeights, Trajectory,
    WeightDataSource, WeightLearnConfig,
};
use crate::policy::{build_model, Decode, Init, PolicyCheckpoint, Prompt, Response, Token, EOS};
use crate::seed;

/// How each round's reference model is chosen from the trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReferenceStrategy {
    PreviousPolicy,
    FixedSft,
    SimpleAverage,
    LearnedWeights(WeightLearnConfig),
}

impl ExperimentConfig {
    pub fn reference_strategy(&self) -> ReferenceStrategy {
        match self.strategy {
            StrategyKind::PreviousPolicy => ReferenceStrategy::PreviousPolicy,
            StrategyKind::FixedSft => ReferenceStrategy::FixedSft,
            StrategyKind::SimpleAverage => ReferenceStrategy::SimpleAverage,
            StrategyKind::LearnedWeights => ReferenceStrategy::LearnedWeights(self.weights),
        }
    }
}

/// Reference for the next round. Only `LearnedWeights` returns weights.
///
/// With a single checkpoint every strategy returns that checkpoint unchanged.
pub fn next_reference(
    strategy: &ReferenceStrategy,
    trajectory: &Trajectory,
    dataset: &[PreferenceExample],
) -> Result<(PolicyCheckpoint, Option<LearnedWeights>)> {
    match strategy {
        ReferenceStrategy::PreviousPolicy => Ok((trajectory.last().clone(), None)),
        ReferenceStrategy::FixedSft => Ok((trajectory.first().clone(), None)),
        ReferenceStrategy::SimpleAverage if trajectory.len() == 1 => Ok((trajectory.first().clone(), None)),
        ReferenceStrategy::SimpleAverage => {
            let alpha = MergeWeights::uniform(trajectory.len())?.alpha();
            Ok((merge_checkpoints(trajectory, &alpha)?, None))
        }
        ReferenceStrategy::LearnedWeights(cfg) if trajectory.len() == 1 => {
            let weights = MergeWeights::uniform(1)?;
            let objective = weight_objective_and_grad(trajectory, weights.raw(), dataset, cfg.beta, cfg.lambda)?;
            let learned = LearnedWeights {
                weights,
                loss_trace: Vec::new(),
                final_preference_loss: objective.preference_loss,
            };
            Ok((trajectory.first().clone(), Some(learned)))
        }
        ReferenceStrategy::LearnedWeights(cfg) => {
            let learned = learn_weights(trajectory, dataset, cfg)?;
            let merged = merge_checkpoints(trajectory, &learned.weights.alpha())?;
            Ok((merged, Some(learned)))
        }
    }
}

/// Per-round results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub round: usize,
    pub reference_label: String,
    /// Merge weights over the checkpoints the reference was built from.
    pub alpha: Option<Vec<f64>>,
    pub train_pairs: usize,
    pub flipped_pairs: usize,
    pub train_loss_final: f64,
    pub win_rate: f64,
    pub ood_win_rate: f64,
    pub mean_gold_reward: f64,
    pub ood_gold_reward: f64,
    pub lc_win_rate: f64,
    /// `(step, mean chosen reward, mean rejected reward)` on the clean
    /// held-out pairs, from step 0 through the last update.
    pub margin_trace: Vec<(u64, f64, f64)>,
}

impl IterationRecord {
    /// Mean chosen minus mean rejected implicit reward after the last step.
    pub fn final_margin(&self) -> f64 {
        self.margin_trace.last().map_or(0.0, |&(_, c, r)| c - r)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub records: Vec<IterationRecord>,
    /// `<out>/<run_id>` when outputs were persisted.
    pub run_dir: Option<PathBuf>,
}

/// Seed purposes drawn once per run (round 0).
pub const RUN_SEED_PURPOSES: [&str; 12] = [
    "gold_rm",
    "init",
    "sft_prompts",
    "sft_data",
    "sft_train",
    "train_prompts",
    "eval_id",
    "eval_ood",
    "heldout_pairs",
    "weight_prompts",
    "static_pairs",
    "static_noise",
];

/// Seed purposes drawn in every round `t >= 1`.
pub const ROUND_SEED_PURPOSES: [&str; 5] = ["pairs", "noise", "dpo", "weights", "weight_pairs"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    /// Resolved config as TOML.
    pub config: String,
    /// `round_<t>` -> purpose -> seed.
    pub seeds: BTreeMap<String, BTreeMap<String, u64>>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let resolved = cfg.resolved();
        let mut seeds = BTreeMap::new();
        let mut artifacts = vec![
            "manifest.json".to_string(),
            "gold_rm.json".into(),
            "metrics.csv".into(),
            "round_0/policy.ckpt".into(),
        ];
        seeds.insert(
            "round_0".to_string(),
            RUN_SEED_PURPOSES
                .iter()
                .map(|p| (p.to_string(), seed::for_round(cfg.master_seed, 0, p)))
                .collect(),
        );
        for t in 1..=cfg.rounds {
            seeds.insert(
                format!("round_{t}"),
                ROUND_SEED_PURPOSES
                    .iter()
                    .map(|p| (p.to_string(), seed::for_round(cfg.master_seed, t, p)))
                    .collect(),
            );
            for f in ["policy.ckpt", "reference.ckpt", "train.jsonl", "metrics.csv"] {
                artifacts.push(format!("round_{t}/{f}"));
            }
            if cfg.strategy == StrategyKind::LearnedWeights {
                artifacts.push(format!("round_{t}/weights.json"));
            }
        }
        Ok(RunManifest {
            run_id: cfg.run_id.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: resolved.to_toml()?,
            seeds,
            artifacts,
        })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

/// Weights file written next to each learned reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub raw: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
}

fn at(round: usize, stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        round,
        stage,
        source: Box::new(e),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn gold_rm_for(cfg: &ExperimentConfig) -> Result<GoldRewardModel> {
    GoldRewardModel::new(
        cfg.model.vocab_size,
        seed::for_round(cfg.master_seed, 0, "gold_rm"),
        cfg.gold_rm.length_penalty,
    )
}

fn random_response(rng: &mut impl Rng, vocab_size: usize, max_len: usize) -> Result<Response> {
    let len = rng.random_range(0..max_len);
    let mut tokens: Vec<Token> = (0..len).map(|_| rng.random_range(1..vocab_size as Token)).collect();
    tokens.push(EOS);
    Response::new(tokens)
}

/// SFT targets: for each prompt, the better of two uniformly random
/// responses under the gold RM.
pub fn sft_dataset(cfg: &ExperimentConfig, rm: &GoldRewardModel) -> Result<Vec<SftExample>> {
    let spec = cfg.spec();
    let prompts = generate_prompts(
        cfg.sft.examples,
        cfg.sft.prompt_len,
        spec.vocab_size,
        seed::for_round(cfg.master_seed, 0, "sft_prompts"),
        PromptDistribution::UniformNonEos,
    )?;
    let base = seed::for_round(cfg.master_seed, 0, "sft_data");
    prompts
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut rng = seed::rng(seed::derive(base, &[i as u64]));
            let a = random_response(&mut rng, spec.vocab_size, spec.max_response_len)?;
            let b = random_response(&mut rng, spec.vocab_size, spec.max_response_len)?;
            let response = if gold_reward(rm, &prompt, &b)? > gold_reward(rm, &prompt, &a)? {
                b
            } else {
                a
            };
            Ok(SftExample { prompt, response })
        })
        .collect()
}

/// Initial model followed by SFT; the result is checkpoint 0.
pub fn sft_policy(cfg: &ExperimentConfig, rm: &GoldRewardModel) -> Result<PolicyCheckpoint> {
    let init = build_model(
        cfg.spec(),
        Init::SeededNormal {
            stddev: cfg.model.init_stddev,
        },
        seed::for_round(cfg.master_seed, 0, "init"),
    )?;
    let data = sft_dataset(cfg, rm)?;
    let train = DpoConfig {
        seed: seed::for_round(cfg.master_seed, 0, "sft_train"),
        ..cfg.sft.train
    };
    Ok(train_stage(&init, Objective::Sft(&data), &train)?
        .checkpoint
        .relabeled(0, "sft"))
}

pub fn train_prompts(cfg: &ExperimentConfig) -> Result<Vec<Prompt>> {
    generate_prompts(
        cfg.per_round.pairs,
        cfg.per_round.prompt_len,
        cfg.model.vocab_size,
        seed::for_round(cfg.master_seed, 0, "train_prompts"),
        PromptDistribution::UniformNonEos,
    )
}

/// In-domain and out-of-domain evaluation prompts.
pub fn eval_prompts(cfg: &ExperimentConfig) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
    let v = cfg.model.vocab_size;
    let len = cfg.per_round.prompt_len;
    let id = generate_prompts(
        cfg.eval.n_prompts_id,
        len,
        v,
        seed::derive(seed::for_round(cfg.master_seed, 0, "eval_id"), &[cfg.eval.seed]),
        PromptDistribution::UniformNonEos,
    )?;
    let ood = generate_prompts(
        cfg.eval.n_prompts_ood,
        len,
        v,
        seed::derive(seed::for_round(cfg.master_seed, 0, "eval_ood"), &[cfg.eval.seed]),
        cfg.eval.ood_distribution,
    )?;
    Ok((id, ood))
}

fn sampling(cfg: &ExperimentConfig) -> Decode {
    Decode {
        temperature: cfg.per_round.temperature,
        max_len: cfg.model.max_response_len,
    }
}

/// Clean pairs from `policy`, then label noise at `noise_p`.
pub fn noisy_pairs(
    cfg: &ExperimentConfig,
    policy: &PolicyCheckpoint,
    prompts: &[Prompt],
    rm: &GoldRewardModel,
    pair_seed: u64,
    noise_seed: u64,
) -> Result<Vec<PreferenceExample>> {
    let clean = build_preference_pairs(policy, prompts, cfg.per_round.k, rm, sampling(cfg), pair_seed)?;
    inject_label_noise(
        &clean,
        NoiseSpec {
            p: cfg.per_round.noise_p,
            seed: noise_seed,
        },
    )
}

/// Contiguous slice `index` of `parts` near-equal slices.
fn partition<T: Clone>(items: &[T], parts: usize, index: usize) -> Vec<T> {
    let n = items.len();
    items[index * n / parts..(index + 1) * n / parts].to_vec()
}

/// Trajectory the merge strategies draw from.
fn merge_pool(traj: &Trajectory, include_sft: bool) -> Result<Trajectory> {
    if include_sft || traj.len() == 1 {
        Ok(traj.clone())
    } else {
        Trajectory::new(traj.checkpoints()[1..].to_vec())
    }
}

/// Runs SFT and `cfg.rounds` DPO rounds. With `out` set, artifacts go to
/// `out/<run_id>/`; a failing stage leaves earlier artifacts in place.
pub fn run_iterative(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let run_dir = out.map(|o| o.join(&cfg.run_id));
    let master = cfg.master_seed;
    let rm = gold_rm_for(cfg).map_err(at(0, "gold_rm"))?;
    if let Some(dir) = &run_dir {
        let manifest = RunManifest::new(cfg)?;
        write_file(&dir.join("manifest.json"), manifest.to_json().as_bytes())?;
        write_file(&dir.join("gold_rm.json"), rm.to_json().as_bytes())?;
    }

    let sft = sft_policy(cfg, &rm).map_err(at(0, "sft"))?;
    if let Some(dir) = &run_dir {
        ensure_dir(&dir.join("round_0"))?;
        checkpoint::write(&dir.join("round_0/policy.ckpt"), &sft)?;
    }
    let prompts = train_prompts(cfg).map_err(at(0, "prompts"))?;
    let (id_prompts, ood_prompts) = eval_prompts(cfg).map_err(at(0, "prompts"))?;
    let heldout = build_preference_pairs(
        &sft,
        &id_prompts,
        cfg.per_round.k,
        &rm,
        sampling(cfg),
        seed::for_round(master, 0, "heldout_pairs"),
    )
    .map_err(at(0, "heldout_pairs"))?;
    let static_data = match cfg.data_schedule {
        DataSchedule::PartitionedStatic { .. } => Some(
            noisy_pairs(
                cfg,
                &sft,
                &prompts,
                &rm,
                seed::for_round(master, 0, "static_pairs"),
                seed::for_round(master, 0, "static_noise"),
            )
            .map_err(at(0, "data"))?,
        ),
        DataSchedule::RegenerateEachRound => None,
    };
    let weight_prompts = match cfg.weights.dataset_source {
        WeightDataSource::HeldOutSplit { fraction } if cfg.strategy == StrategyKind::LearnedWeights => {
            generate_prompts(
                (fraction * cfg.per_round.pairs as f64).ceil() as usize,
                cfg.per_round.prompt_len,
                cfg.model.vocab_size,
                seed::for_round(master, 0, "weight_prompts"),
                PromptDistribution::UniformNonEos,
            )
            .map_err(at(0, "prompts"))?
        }
        _ => Vec::new(),
    };

    let strategy = cfg.reference_strategy();
    let lambda = (cfg.strategy == StrategyKind::LearnedWeights).then_some(cfg.weights.lambda);
    let mut trajectory = Trajectory::new(vec![sft.clone()])?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut all_rows = Vec::new();

    for t in 1..=cfg.rounds {
        let previous = trajectory.last().clone();
        let data = match (&static_data, cfg.data_schedule) {
            (Some(full), DataSchedule::PartitionedStatic { parts }) => partition(full, parts, t - 1),
            _ => noisy_pairs(
                cfg,
                &previous,
                &prompts,
                &rm,
                seed::for_round(master, t, "pairs"),
                seed::for_round(master, t, "noise"),
            )
            .map_err(at(t, "data"))?,
        };

        let weight_data = match cfg.weights.dataset_source {
            WeightDataSource::HeldOutSplit { .. } if !weight_prompts.is_empty() => build_preference_pairs(
                &previous,
                &weight_prompts,
                cfg.per_round.k,
                &rm,
                sampling(cfg),
                seed::for_round(master, t, "weight_pairs"),
            )
            .map_err(at(t, "weight_data"))?,
            _ => data.clone(),
        };
        let strategy = match strategy {
            ReferenceStrategy::LearnedWeights(w) => ReferenceStrategy::LearnedWeights(WeightLearnConfig {
                seed: seed::for_round(master, t, "weights"),
                ..w
            }),
            s => s,
        };
        let pool = match strategy {
            ReferenceStrategy::SimpleAverage | ReferenceStrategy::LearnedWeights(_) => {
                merge_pool(&trajectory, cfg.merge_include_sft)?
            }
            _ => trajectory.clone(),
        };
        let (reference, learned) = next_reference(&strategy, &pool, &weight_data).map_err(at(t, "reference"))?;
        let reference_label = reference.label().to_string();

        let init = match cfg.policy_init {
            PolicyInit::FromPreviousPolicy => previous,
            PolicyInit::FromMergedReference => reference.clone(),
        };
        let dpo = DpoConfig {
            seed: seed::for_round(master, t, "dpo"),
            ..cfg.per_round.dpo
        };
        let mut margin_trace = Vec::new();
        let stage = train_stage_observed(
            &init,
            Objective::Dpo {
                data: &data,
                reference: &reference,
            },
            &dpo,
            |step, policy| {
                let (c, r) = mean_margins(&implicit_reward_margins(policy, &reference, &heldout, dpo.beta)?);
                margin_trace.push((step, c, r));
                Ok(())
            },
        )
        .map_err(at(t, "dpo"))?;
        let policy = stage.checkpoint.relabeled(t as u32, &format!("round_{t}"));

        let eval = (|| -> Result<_> {
            Ok((
                win_rate(&policy, &sft, &id_prompts, &rm)?,
                win_rate(&policy, &sft, &ood_prompts, &rm)?,
                mean_gold_reward(&policy, &id_prompts, &rm)?,
                mean_gold_reward(&policy, &ood_prompts, &rm)?,
                lc_win_rate(&policy, &sft, &id_prompts, &rm, &cfg.eval)?,
            ))
        })()
        .map_err(at(t, "eval"))?;
        let record = IterationRecord {
            round: t,
            reference_label,
            alpha: learned.as_ref().map(|l| l.weights.alpha()),
            train_pairs: data.len(),
            flipped_pairs: data.iter().filter(|e| e.flipped).count(),
            train_loss_final: stage.loss_trace.last().copied().unwrap_or(f64::NAN),
            win_rate: eval.0,
            ood_win_rate: eval.1,
            mean_gold_reward: eval.2,
            ood_gold_reward: eval.3,
            lc_win_rate: eval.4,
            margin_trace,
        };

        if let Some(dir) = &run_dir {
            let round_dir = dir.join(format!("round_{t}"));
            let mut persist = || -> Result<()> {
                ensure_dir(&round_dir)?;
                checkpoint::write(&round_dir.join("policy.ckpt"), &policy)?;
                checkpoint::write(&round_dir.join("reference.ckpt"), &reference)?;
                write_jsonl(&round_dir.join("train.jsonl"), &data)?;
                if let Some(l) = &learned {
                    let file = WeightsFile {
                        raw: l.weights.raw().to_vec(),
                        alpha: l.weights.alpha(),
                        lambda: cfg.weights.lambda,
                        steps: cfg.weights.steps,
                        seed: seed::for_round(master, t, "weights"),
                    };
                    let json = serde_json::to_string_pretty(&file).expect("weights serialize");
                    write_file(&round_dir.join("weights.json"), json.as_bytes())?;
                }
                let rows = metrics_rows(cfg, lambda, &record);
                let mut buf = Vec::new();
                write_metrics_csv(&mut buf, &rows)?;
                write_file(&round_dir.join("metrics.csv"), &buf)?;
                all_rows.extend(rows);
                let mut buf = Vec::new();
                write_metrics_csv(&mut buf, &all_rows)?;
                write_file(&dir.join("metrics.csv"), &buf)
            };
            persist().map_err(at(t, "persist"))?;
        }
        trajectory.push(policy)?;
        records.push(record);
    }

    Ok(RunOutput {
        trajectory,
        records,
        run_dir,
    })
}

/// Summary row followed by one row per margin-trace step.
pub fn metrics_rows(cfg: &ExperimentConfig, lambda: Option<f64>, record: &IterationRecord) -> Vec<MetricsRow> {
    let base = MetricsRow {
        run_id: cfg.run_id.clone(),
        round: record.round,
        strategy: cfg.strategy.name().into(),
        noise_p: cfg.per_round.noise_p,
        lambda,
        seed: cfg.master_seed,
        ..MetricsRow::default()
    };
    let mut rows = vec![MetricsRow {
        win_rate: Some(record.win_rate),
        ood_win_rate: Some(record.ood_win_rate),
        gold_reward: Some(record.mean_gold_reward),
        ood_gold_reward: Some(record.ood_gold_reward),
        lc_win_rate: Some(record.lc_win_rate),
        ..base.clone()
    }];
    rows.extend(record.margin_trace.iter().map(|&(step, c, r)| MetricsRow {
        step: Some(step),
        chosen_reward: Some(c),
        rejected_reward: Some(r),
        ..base.clone()
    }));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSection;
    use crate::policy::{Family, ModelSpec};

    fn small(strategy: StrategyKind, rounds: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ModelSection {
            family: Family::TabularBigram,
            vocab_size: 6,
            context_window: 0,
            embed_dim: 0,
            hidden_dim: 0,
            max_response_len: 5,
            init_stddev: 0.1,
        });
        cfg.rounds = rounds;
        cfg.strategy = strategy;
        cfg.sft.examples = 30;
        cfg.per_round.pairs = 30;
        cfg.eval.n_prompts_id = 20;
        cfg.eval.n_prompts_ood = 20;
        cfg.weights.steps = 20;
        cfg.master_seed = 9;
        cfg
    }

    fn ckpt(params: Vec<f64>, it: u32) -> PolicyCheckpoint {
        PolicyCheckpoint::new(ModelSpec::tabular(2, 3), params, it, "t").unwrap()
    }

    #[test]
    fn single_checkpoint_reference_is_that_checkpoint() {
        let traj = Trajectory::new(vec![ckpt(vec![0.5, -1.0, 2.0, 0.25], 0)]).unwrap();
        let data = vec![PreferenceExample::new(
            Prompt::new(vec![1]).unwrap(),
            Response::new(vec![1, 0]).unwrap(),
            Response::eos(),
        )
        .unwrap()];
        for s in [
            ReferenceStrategy::PreviousPolicy,
            ReferenceStrategy::FixedSft,
            ReferenceStrategy::SimpleAverage,
            ReferenceStrategy::LearnedWeights(WeightLearnConfig::default()),
        ] {
            let (r, w) = next_reference(&s, &traj, &data).unwrap();
            assert_eq!(r.params(), traj.first().params());
            assert_eq!(w.is_some(), matches!(s, ReferenceStrategy::LearnedWeights(_)));
        }
    }

    #[test]
    fn strategies_pick_their_reference() {
        let a = ckpt(vec![0.0, 2.0, -2.0, 4.0], 0);
        let b = ckpt(vec![2.0, 0.0, 2.0, 0.0], 1);
        let traj = Trajectory::new(vec![a.clone(), b.clone()]).unwrap();
        let data = vec![PreferenceExample::new(
            Prompt::new(vec![1]).unwrap(),
            Response::new(vec![1, 0]).unwrap(),
            Response::eos(),
        )
        .unwrap()];
        let (r, _) = next_reference(&ReferenceStrategy::PreviousPolicy, &traj, &data).unwrap();
        assert_eq!(r.params(), b.params());
        let (r, _) = next_reference(&ReferenceStrategy::FixedSft, &traj, &data).unwrap();
        assert_eq!(r.params(), a.params());
        let (r, w) = next_reference(&ReferenceStrategy::SimpleAverage, &traj, &data).unwrap();
        assert_eq!(r.params(), &[1.0, 1.0, 0.0, 2.0]);
        assert!(w.is_none());
    }

    #[test]
    fn partitions_are_disjoint_and_cover() {
        let items: Vec<usize> = (0..17).collect();
        let mut all = Vec::new();
        for i in 0..4 {
            let p = partition(&items, 4, i);
            assert!(p.len() == 4 || p.len() == 5);
            all.extend(p);
        }
        assert_eq!(all, items);
    }

    #[test]
    fn run_structure_and_round_one_equivalence() {
        let pp = run_iterative(&small(StrategyKind::PreviousPolicy, 2), None).unwrap();
        let lw = run_iterative(&small(StrategyKind::LearnedWeights, 2), None).unwrap();
        assert_eq!(pp.trajectory.len(), 3);
        assert_eq!(pp.records.len(), 2);
        let idx: Vec<u32> = pp
            .trajectory
            .checkpoints()
            .iter()
            .map(|c| c.iteration_index())
            .collect();
        assert_eq!(idx, [0, 1, 2]);
        assert_eq!(
            pp.trajectory.checkpoints()[1].params(),
            lw.trajectory.checkpoints()[1].params()
        );
        assert_eq!(pp.records[0].win_rate, lw.records[0].win_rate);
        assert!(pp.records.iter().all(|r| r.alpha.is_none()));
        assert!(lw.records.iter().all(|r| r.alpha.is_some()));
        assert_eq!(lw.records[1].alpha.as_ref().unwrap().len(), 2);
        // Policy starts at the reference, so step-0 margins are exactly zero.
        for r in &pp.records {
            assert_eq!(r.margin_trace[0], (0, 0.0, 0.0));
            assert!((0.0..=1.0).contains(&r.win_rate) && (0.0..=1.0).contains(&r.ood_win_rate));
        }
    }

    #[test]
    fn zero_rounds_rejected() {
        let err = run_iterative(&small(StrategyKind::PreviousPolicy, 0), None).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn partitioned_schedule_uses_disjoint_slices() {
        let mut cfg = small(StrategyKind::PreviousPolicy, 3);
        cfg.data_schedule = DataSchedule::PartitionedStatic { parts: 3 };
        let dir = tempfile::tempdir().unwrap();
        let run = run_iterative(&cfg, Some(dir.path())).unwrap();
        let run_dir = run.run_dir.unwrap();
        let mut seen = Vec::new();
        for t in 1..=3 {
            let d = crate::data::read_jsonl(&run_dir.join(format!("round_{t}/train.jsonl"))).unwrap();
            assert_eq!(d.len(), run.records[t - 1].train_pairs);
            seen.extend(d);
        }
        let sft = checkpoint::read(&run_dir.join("round_0/policy.ckpt")).unwrap();
        let rm = gold_rm_for(&cfg).unwrap();
        let full = noisy_pairs(
            &cfg,
            &sft,
            &train_prompts(&cfg).unwrap(),
            &rm,
            seed::for_round(cfg.master_seed, 0, "static_pairs"),
            seed::for_round(cfg.master_seed, 0, "static_noise"),
        )
        .unwrap();
        assert_eq!(seen, full);
    }

    #[test]
    fn stage_errors_name_round_and_stage() {
        let mut cfg = small(StrategyKind::PreviousPolicy, 1);
        cfg.per_round.temperature = 1e-300;
        cfg.model.vocab_size = 2;
        cfg.model.max_response_len = 1;
        // Every candidate is [EOS], so no pairs can be built.
        let err = run_iterative(&cfg, None).unwrap_err();
        match err {
            Error::Stage { round, stage, .. } => assert_eq!((round, stage), (1, "dpo")),
            other => panic!("unexpected {other}"),
        }
    }
}
