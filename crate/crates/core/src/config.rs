//! Experiment configuration: a TOML tree whose sections mirror
//! [`ExperimentConfig`]. Unknown keys are rejected and every omitted value
//! has a default, which [`ExperimentConfig::resolved`] writes out explicitly.
//!
//! ```toml
//! rounds = 3
//! strategy = "learned_weights"
//!
//! [model]
//! family = "tiny_neural_lm"
//! vocab_size = 16
//!
//! [per_round]
//! noise_p = 0.3
//!
//! [weights]
//! lambda = 0.1
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_LENGTH_PENALTY;
use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::merge::WeightLearnConfig;
use crate::policy::{Family, ModelSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    PreviousPolicy,
    FixedSft,
    SimpleAverage,
    LearnedWeights,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::PreviousPolicy,
        StrategyKind::FixedSft,
        StrategyKind::SimpleAverage,
        StrategyKind::LearnedWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::PreviousPolicy => "previous_policy",
            StrategyKind::FixedSft => "fixed_sft",
            StrategyKind::SimpleAverage => "simple_average",
            StrategyKind::LearnedWeights => "learned_weights",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::validation(
                "strategy",
                format!(
                    "unknown strategy {s:?}; expected previous_policy, fixed_sft, simple_average or learned_weights"
                ),
            )
        })
    }
}

/// How a round's policy is initialized before DPO.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    #[default]
    FromPreviousPolicy,
    FromMergedReference,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSchedule {
    /// Fresh pairs from the latest policy every round.
    #[default]
    RegenerateEachRound,
    /// One dataset from the SFT policy, split into `parts` disjoint slices;
    /// round `t` trains on slice `t - 1`.
    PartitionedStatic { parts: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub vocab_size: usize,
    #[serde(default = "defaults::context_window")]
    pub context_window: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::max_response_len")]
    pub max_response_len: usize,
    /// Standard deviation of the initial parameters before SFT.
    #[serde(default = "defaults::init_stddev")]
    pub init_stddev: f64,
}

impl ModelSection {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            family: self.family,
            vocab_size: self.vocab_size,
            context_window: self.context_window,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_response_len: self.max_response_len,
        }
        .normalized()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoldRmSection {
    pub length_penalty: f64,
}

impl Default for GoldRmSection {
    fn default() -> Self {
        GoldRmSection {
            length_penalty: DEFAULT_LENGTH_PENALTY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub examples: usize,
    pub prompt_len: usize,
    pub train: DpoConfig,
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection {
            examples: 200,
            prompt_len: 3,
            train: DpoConfig {
                epochs: 3,
                ..DpoConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundSection {
    /// Size of the fixed training prompt pool; each prompt yields at most
    /// one pair per round.
    pub pairs: usize,
    /// Candidates sampled per prompt.
    pub k: usize,
    pub noise_p: f64,
    pub temperature: f64,
    pub prompt_len: usize,
    pub dpo: DpoConfig,
}

impl Default for RoundSection {
    fn default() -> Self {
        RoundSection {
            pairs: 200,
            k: 4,
            noise_p: 0.0,
            temperature: 1.0,
            prompt_len: 3,
            dpo: DpoConfig {
                epochs: 10,
                ..DpoConfig::default()
            },
        }
    }
}

mod defaults {
    pub fn run_id() -> String {
        "run".into()
    }
    pub fn rounds() -> usize {
        3
    }
    pub fn yes() -> bool {
        true
    }
    pub fn context_window() -> usize {
        3
    }
    pub fn embed_dim() -> usize {
        8
    }
    pub fn hidden_dim() -> usize {
        16
    }
    pub fn max_response_len() -> usize {
        8
    }
    pub fn init_stddev() -> f64 {
        0.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::run_id")]
    pub run_id: String,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub strategy: StrategyKind,
    #[serde(default)]
    pub policy_init: PolicyInit,
    /// Whether the SFT checkpoint takes part in merged references.
    #[serde(default = "defaults::yes")]
    pub merge_include_sft: bool,
    pub model: ModelSection,
    #[serde(default)]
    pub gold_rm: GoldRmSection,
    #[serde(default)]
    pub sft: SftSection,
    #[serde(default)]
    pub per_round: RoundSection,
    #[serde(default)]
    pub data_schedule: DataSchedule,
    /// Used when `strategy = "learned_weights"`.
    #[serde(default)]
    pub weights: WeightLearnConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// All defaults around the given model.
    pub fn new(model: ModelSection) -> Self {
        ExperimentConfig {
            run_id: defaults::run_id(),
            master_seed: 0,
            rounds: defaults::rounds(),
            strategy: StrategyKind::default(),
            policy_init: PolicyInit::default(),
            merge_include_sft: true,
            model,
            gold_rm: GoldRmSection::default(),
            sft: SftSection::default(),
            per_round: RoundSection::default(),
            data_schedule: DataSchedule::default(),
            weights: WeightLearnConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// The tiny neural model used for the noise-robustness experiments.
    pub fn desk_default() -> Self {
        ExperimentConfig::new(ModelSection {
            family: Family::TinyNeuralLm,
            vocab_size: 16,
            context_window: defaults::context_window(),
            embed_dim: defaults::embed_dim(),
            hidden_dim: defaults::hidden_dim(),
            max_response_len: defaults::max_response_len(),
            init_stddev: defaults::init_stddev(),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        self.model.spec()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::validation(field, reason));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == "." || self.run_id == ".." {
            return bad("run_id", format!("{:?} is not a plain directory name", self.run_id));
        }
        if self.master_seed > i64::MAX as u64 {
            return bad("master_seed", format!("must be <= {}", i64::MAX));
        }
        if self.rounds < 1 {
            return bad("rounds", "must be >= 1".into());
        }
        self.spec().validate().map_err(|e| match e {
            Error::Validation { field, reason } => Error::validation(format!("model.{field}"), reason),
            other => other,
        })?;
        if !(self.model.init_stddev >= 0.0 && self.model.init_stddev.is_finite()) {
            return bad("model.init_stddev", "must be >= 0".into());
        }
        if !self.gold_rm.length_penalty.is_finite() {
            return bad("gold_rm.length_penalty", "must be finite".into());
        }
        if self.sft.examples < 1 {
            return bad("sft.examples", "must be >= 1".into());
        }
        if self.sft.prompt_len < 1 {
            return bad("sft.prompt_len", "must be >= 1".into());
        }
        self.sft.train.validate("sft.train")?;
        let r = &self.per_round;
        if r.pairs < 1 {
            return bad("per_round.pairs", "must be >= 1".into());
        }
        if r.k < 2 {
            return bad("per_round.k", "must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&r.noise_p) {
            return bad("per_round.noise_p", format!("must be in [0, 1], got {}", r.noise_p));
        }
        if !(r.temperature > 0.0 && r.temperature.is_finite()) {
            return bad("per_round.temperature", "must be > 0".into());
        }
        if r.prompt_len < 1 {
            return bad("per_round.prompt_len", "must be >= 1".into());
        }
        r.dpo.validate("per_round.dpo")?;
        if let DataSchedule::PartitionedStatic { parts } = self.data_schedule {
            if parts < self.rounds {
                return bad(
                    "data_schedule.parts",
                    format!("must be >= rounds ({}), got {parts}", self.rounds),
                );
            }
            if parts > r.pairs {
                return bad(
                    "data_schedule.parts",
                    format!("must be <= per_round.pairs ({}), got {parts}", r.pairs),
                );
            }
        }
        self.weights.validate("weights")?;
        self.eval.validate()
    }

    /// Copy with every implicit default written out, so that emitting and
    /// re-parsing it reproduces the run exactly.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        let spec = cfg.spec();
        cfg.model.context_window = spec.context_window;
        cfg.model.embed_dim = spec.embed_dim;
        cfg.model.hidden_dim = spec.hidden_dim;
        cfg
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot emit config: {e}")))
    }

    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::WeightDataSource;

    const MINIMAL: &str = "rounds = 2\n[model]\nfamily = \"tabular_bigram\"\nvocab_size = 6\n";

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.rounds, 2);
        assert_eq!(cfg.per_round.dpo.beta, 0.1);
        assert_eq!(cfg.weights.lambda, 0.1);
        assert_eq!(cfg.per_round.k, 4);
        assert_eq!(cfg.per_round.noise_p, 0.0);
        assert_eq!(cfg.strategy, StrategyKind::PreviousPolicy);
        assert_eq!(cfg.data_schedule, DataSchedule::RegenerateEachRound);
        assert_eq!(cfg.eval.lc_gamma, 0.05);
        assert_eq!(cfg.spec(), ModelSpec::tabular(6, 8));
    }

    #[test]
    fn resolved_config_roundtrips() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.strategy = StrategyKind::LearnedWeights;
        cfg.data_schedule = DataSchedule::PartitionedStatic { parts: 4 };
        cfg.weights.dataset_source = WeightDataSource::HeldOutSplit { fraction: 0.25 };
        cfg.per_round.noise_p = 0.3;
        cfg.master_seed = 12345;
        let resolved = cfg.resolved();
        let text = resolved.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), resolved);

        let minimal = ExperimentConfig::from_toml(MINIMAL).unwrap().resolved();
        assert_eq!(
            ExperimentConfig::from_toml(&minimal.to_toml().unwrap()).unwrap(),
            minimal
        );
    }

    #[test]
    fn constraint_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("rounds = 0\n[model]\nfamily = \"tabular_bigram\"\nvocab_size = 6\n")
            .unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("rounds"), "{err}");

        let mut cfg = ExperimentConfig::desk_default();
        cfg.per_round.noise_p = 1.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("noise_p") && msg.contains("[0, 1]"), "{msg}");

        cfg = ExperimentConfig::desk_default();
        cfg.data_schedule = DataSchedule::PartitionedStatic { parts: 2 };
        assert!(cfg.validate().unwrap_err().to_string().contains("parts"));

        cfg = ExperimentConfig::desk_default();
        cfg.model.vocab_size = 1;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.vocab_size"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            format!("{MINIMAL}roundz = 3\n"),
            format!("{MINIMAL}[per_round]\nnoise = 0.1\n"),
            format!("{MINIMAL}[weights]\nlamda = 0.1\n"),
            format!("{MINIMAL}[per_round.dpo]\nbeta = 0.1\nlr = 1.0\n"),
        ] {
            let err = ExperimentConfig::from_toml(&text).unwrap_err();
            assert!(err.is_config(), "{err}");
            assert!(err.to_string().contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn missing_model_is_an_error() {
        assert!(ExperimentConfig::from_toml("rounds = 3\n").unwrap_err().is_config());
    }

    #[test]
    fn strategy_names_parse() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("dpo_iter".parse::<StrategyKind>().unwrap_err().is_config());
    }

    #[test]
    fn parse_config_reports_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.toml");
        let err = parse_config(&missing).unwrap_err();
        assert!(err.is_config() && err.to_string().contains("nope.toml"));
        let path = dir.path().join("c.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        assert_eq!(parse_config(&path).unwrap().rounds, 2);
    }
}
