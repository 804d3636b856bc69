//! Command-line front end. Every subcommand reads a TOML experiment config
//! and writes only under its `--out` directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{parse_config, ExperimentConfig, StrategyKind};
use crate::data::{build_preference_pairs, inject_label_noise, read_jsonl, write_jsonl, NoiseSpec};
use crate::dpo::{train_stage, DpoConfig, Objective};
use crate::error::{Error, Result};
use crate::eval::{lc_win_rate, mean_gold_reward, win_rate, write_metrics_csv, MetricsRow};
use crate::merge::{learn_weights, merge_checkpoints, MergeWeights, Trajectory, WeightLearnConfig};
use crate::pipeline::{eval_prompts, gold_rm_for, run_iterative, sft_policy, train_prompts, WeightsFile};
use crate::policy::{Decode, PolicyCheckpoint};
use crate::seed;

#[derive(Debug, Parser)]
#[command(
    name = "tpmm",
    version,
    about = "Iterative DPO with trajectory-merged reference models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `per_round.noise_p`.
    #[arg(long = "noise-p")]
    noise_p: Option<f64>,
    /// Overrides `weights.lambda`.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides `strategy`.
    #[arg(long)]
    strategy: Option<String>,
    /// Overrides `rounds`.
    #[arg(long)]
    rounds: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample candidates and write clean preference pairs on the training prompts.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Generating policy; defaults to the SFT policy of the config.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Round whose seeds are used.
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Flip preference labels at `per_round.noise_p`.
    InjectNoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Train the SFT policy (checkpoint 0).
    Sft {
        #[command(flatten)]
        common: Common,
    },
    /// One DPO stage against a given reference.
    DpoRound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Weighted parameter average of checkpoints (uniform by default).
    Merge {
        #[command(flatten)]
        common: Common,
        /// Checkpoints in trajectory order.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated simplex weights.
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
    },
    /// Learn merge weights on a preference dataset and write the merge.
    LearnWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Win rates and gold rewards of a policy against a baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Round recorded in the metrics row.
        #[arg(long, default_value_t = 0)]
        round: usize,
    },
    /// Full SFT plus iterative DPO run under `<out>/<run_id>/`.
    RunExperiment {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = parse_config(&self.config)?;
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(p) = self.noise_p {
            cfg.per_round.noise_p = p;
        }
        if let Some(l) = self.lambda {
            cfg.weights.lambda = l;
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = s.parse::<StrategyKind>()?;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(cfg)
    }
}

fn load_trajectory(paths: &[PathBuf]) -> Result<Trajectory> {
    let ckpts = paths
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(checkpoint::read(p)?.relabeled(i as u32, "loaded")))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(ckpts)
}

fn written(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, policy, round } => {
            let cfg = common.load()?;
            let rm = gold_rm_for(&cfg)?;
            let policy = match policy {
                Some(p) => checkpoint::read(&p)?,
                None => sft_policy(&cfg, &rm)?,
            };
            let decode = Decode {
                temperature: cfg.per_round.temperature,
                max_len: cfg.model.max_response_len,
            };
            let pairs = build_preference_pairs(
                &policy,
                &train_prompts(&cfg)?,
                cfg.per_round.k,
                &rm,
                decode,
                seed::for_round(cfg.master_seed, round, "pairs"),
            )?;
            let path = common.out.join("pairs.jsonl");
            write_jsonl(&path, &pairs)?;
            written(&path);
            let rm_path = common.out.join("gold_rm.json");
            fs::write(&rm_path, rm.to_json()).map_err(|e| Error::io(&rm_path, e))?;
            written(&rm_path);
        }
        Command::InjectNoise { common, input, round } => {
            let cfg = common.load()?;
            let data = read_jsonl(&input)?;
            let noisy = inject_label_noise(
                &data,
                NoiseSpec {
                    p: cfg.per_round.noise_p,
                    seed: seed::for_round(cfg.master_seed, round, "noise"),
                },
            )?;
            let path = common.out.join("noisy.jsonl");
            write_jsonl(&path, &noisy)?;
            println!(
                "flipped {} of {}",
                noisy.iter().filter(|e| e.flipped).count(),
                noisy.len()
            );
            written(&path);
        }
        Command::Sft { common } => {
            let cfg = common.load()?;
            let policy = sft_policy(&cfg, &gold_rm_for(&cfg)?)?;
            let path = common.out.join("policy.ckpt");
            checkpoint::write(&path, &policy)?;
            written(&path);
        }
        Command::DpoRound {
            common,
            policy,
            reference,
            data,
            round,
        } => {
            let cfg = common.load()?;
            let policy = checkpoint::read(&policy)?;
            let reference = checkpoint::read(&reference)?;
            let data = read_jsonl(&data)?;
            let dpo = DpoConfig {
                seed: seed::for_round(cfg.master_seed, round, "dpo"),
                ..cfg.per_round.dpo
            };
            let out = train_stage(
                &policy,
                Objective::Dpo {
                    data: &data,
                    reference: &reference,
                },
                &dpo,
            )?;
            if let Some(loss) = out.loss_trace.last() {
                println!("final batch loss {loss}");
            }
            let path = common.out.join("policy.ckpt");
            checkpoint::write(&path, &out.checkpoint.relabeled(round as u32, "dpo"))?;
            written(&path);
        }
        Command::Merge {
            common,
            checkpoints,
            alpha,
        } => {
            common.load()?;
            let traj = load_trajectory(&checkpoints)?;
            let alpha = match alpha {
                Some(a) => a,
                None => MergeWeights::uniform(traj.len())?.alpha(),
            };
            let path = common.out.join("merged.ckpt");
            checkpoint::write(&path, &merge_checkpoints(&traj, &alpha)?)?;
            written(&path);
        }
        Command::LearnWeights {
            common,
            checkpoints,
            data,
            round,
        } => {
            let cfg = common.load()?;
            let traj = load_trajectory(&checkpoints)?;
            let data = read_jsonl(&data)?;
            let wcfg = WeightLearnConfig {
                seed: seed::for_round(cfg.master_seed, round, "weights"),
                ..cfg.weights
            };
            let learned = learn_weights(&traj, &data, &wcfg)?;
            let file = WeightsFile {
                raw: learned.weights.raw().to_vec(),
                alpha: learned.weights.alpha(),
                lambda: wcfg.lambda,
                steps: wcfg.steps,
                seed: wcfg.seed,
            };
            let path = common.out.join("weights.json");
            let json = serde_json::to_string_pretty(&file).expect("weights serialize");
            fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            written(&path);
            let merged_path = common.out.join("merged.ckpt");
            checkpoint::write(&merged_path, &merge_checkpoints(&traj, &file.alpha)?)?;
            written(&merged_path);
        }
        Command::Evaluate {
            common,
            policy,
            baseline,
            round,
        } => {
            let cfg = common.load()?;
            let rm = gold_rm_for(&cfg)?;
            let policy: PolicyCheckpoint = checkpoint::read(&policy)?;
            let baseline: PolicyCheckpoint = checkpoint::read(&baseline)?;
            let (id, ood) = eval_prompts(&cfg)?;
            let row = MetricsRow {
                run_id: cfg.run_id.clone(),
                round,
                strategy: cfg.strategy.name().into(),
                noise_p: cfg.per_round.noise_p,
                lambda: (cfg.strategy == StrategyKind::LearnedWeights).then_some(cfg.weights.lambda),
                seed: cfg.master_seed,
                win_rate: Some(win_rate(&policy, &baseline, &id, &rm)?),
                ood_win_rate: Some(win_rate(&policy, &baseline, &ood, &rm)?),
                gold_reward: Some(mean_gold_reward(&policy, &id, &rm)?),
                ood_gold_reward: Some(mean_gold_reward(&policy, &ood, &rm)?),
                lc_win_rate: Some(lc_win_rate(&policy, &baseline, &id, &rm, &cfg.eval)?),
                ..MetricsRow::default()
            };
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, std::slice::from_ref(&row))?;
            print!("{}", String::from_utf8_lossy(&buf));
            let path = common.out.join("metrics.csv");
            fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
            written(&path);
        }
        Command::RunExperiment { common } => {
            let cfg = common.load()?;
            let run = run_iterative(&cfg, Some(&common.out))?;
            for r in &run.records {
                println!(
                    "round {}: win_rate {:.3} ood_win_rate {:.3} gold_reward {:.4} lc_win_rate {:.3}",
                    r.round, r.win_rate, r.ood_win_rate, r.mean_gold_reward, r.lc_win_rate
                );
            }
            if let Some(dir) = run.run_dir {
                written(&dir);
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code: 0 on success, 2 for usage or config errors, 1 otherwise.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
