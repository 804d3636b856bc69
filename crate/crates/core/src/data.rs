//! Synthetic corpora: prompts, the gold reward oracle, preference pairs,
//! label-flip noise and JSONL persistence.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_response, Decode, PolicyCheckpoint, Prompt, Response, Token};
use crate::scalar::Scalar;
use crate::seed;

/// Seeded bigram scorer standing in for a learned gold reward model.
///
/// `score(x, y) = sum_u table[y_{u-1}][y_u] - length_penalty * |y|`, where
/// `y_{-1}` is the last prompt token and `|y|` counts the final EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldRewardModel {
    vocab_size: usize,
    seed: u64,
    length_penalty: f64,
    table: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldRmFile {
    v: usize,
    seed: u64,
    length_penalty: f64,
}

pub const DEFAULT_LENGTH_PENALTY: f64 = 0.05;

impl GoldRewardModel {
    pub fn new(vocab_size: usize, seed: u64, length_penalty: f64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let table = (0..vocab_size * vocab_size)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self::from_table(vocab_size, table, length_penalty).map(|rm| GoldRewardModel { seed, ..rm })
    }

    /// A scorer with an explicit `V x V` table (row = previous token).
    pub fn from_table(vocab_size: usize, table: Vec<f64>, length_penalty: f64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::validation("gold_rm.v", "must be >= 2"));
        }
        if table.len() != vocab_size * vocab_size || table.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("gold_rm.table", "must be a finite V x V table"));
        }
        if !(length_penalty >= 0.0 && length_penalty.is_finite()) {
            return Err(Error::validation("gold_rm.length_penalty", "must be >= 0"));
        }
        Ok(GoldRewardModel {
            vocab_size,
            seed: 0,
            length_penalty,
            table,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn length_penalty(&self) -> f64 {
        self.length_penalty
    }

    pub fn score_table(&self) -> &[f64] {
        &self.table
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GoldRmFile {
            v: self.vocab_size,
            seed: self.seed,
            length_penalty: self.length_penalty,
        })
        .expect("gold RM header serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GoldRmFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("gold RM: {e}")))?;
        Self::new(f.v, f.seed, f.length_penalty)
    }
}

pub fn gold_reward(rm: &GoldRewardModel, prompt: &Prompt, response: &Response) -> Result<f64> {
    let v = rm.vocab_size;
    if let Some(t) = prompt
        .tokens()
        .iter()
        .chain(response.tokens())
        .find(|&&t| t as usize >= v)
    {
        return Err(Error::Input(format!("token {t} outside gold RM vocab {v}")));
    }
    let mut prev = prompt.last_or_eos() as usize;
    let mut total = 0.0;
    for &t in response.tokens() {
        total += rm.table[prev * v + t as usize];
        prev = t as usize;
    }
    Ok(total - rm.length_penalty * response.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptDistribution {
    UniformNonEos,
    /// Token `r` drawn with probability proportional to `r^-s`.
    SkewedZipf {
        s: f64,
    },
}

pub fn generate_prompts(
    count: usize,
    prompt_len: usize,
    vocab_size: usize,
    seed: u64,
    distribution: PromptDistribution,
) -> Result<Vec<Prompt>> {
    if count < 1 {
        return Err(Error::Config("prompt count must be >= 1".into()));
    }
    if prompt_len < 1 {
        return Err(Error::Config("prompt_len must be >= 1".into()));
    }
    if vocab_size < 2 {
        return Err(Error::Config("vocab_size must be >= 2".into()));
    }
    let content = (vocab_size - 1) as f64;
    let zipf = match distribution {
        PromptDistribution::UniformNonEos => None,
        PromptDistribution::SkewedZipf { s } => {
            Some(Zipf::new(content, s).map_err(|e| Error::Config(format!("zipf exponent {s}: {e}")))?)
        }
    };
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|_| {
            let tokens = (0..prompt_len)
                .map(|_| match &zipf {
                    None => rng.random_range(1..vocab_size as Token),
                    Some(z) => z.sample(&mut rng) as Token,
                })
                .collect();
            Prompt::new(tokens)
        })
        .collect()
}

/// One labelled comparison `(x, y_w, y_l)`.
///
/// Gold rewards describe the pair as constructed, before any flip; a flip
/// swaps the responses but leaves the reward fields untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: Prompt,
    pub chosen: Response,
    pub rejected: Response,
    pub flipped: bool,
    pub gold_reward_chosen: Option<f64>,
    pub gold_reward_rejected: Option<f64>,
}

impl PreferenceExample {
    pub fn new(prompt: Prompt, chosen: Response, rejected: Response) -> Result<Self> {
        let ex = PreferenceExample {
            prompt,
            chosen,
            rejected,
            flipped: false,
            gold_reward_chosen: None,
            gold_reward_rejected: None,
        };
        ex.check()?;
        Ok(ex)
    }

    pub fn with_rewards(mut self, chosen: f64, rejected: f64) -> Result<Self> {
        self.gold_reward_chosen = Some(chosen);
        self.gold_reward_rejected = Some(rejected);
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::Input("chosen and rejected responses are identical".into()));
        }
        if let (false, Some(c), Some(r)) = (self.flipped, self.gold_reward_chosen, self.gold_reward_rejected) {
            if c < r {
                return Err(Error::Input(format!(
                    "unflipped pair has gold_reward_chosen {c} < gold_reward_rejected {r}"
                )));
            }
        }
        Ok(())
    }

    /// Chosen and rejected exchanged, flip flag toggled.
    pub fn swapped(&self) -> Self {
        PreferenceExample {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            flipped: !self.flipped,
            gold_reward_chosen: self.gold_reward_chosen,
            gold_reward_rejected: self.gold_reward_rejected,
        }
    }
}

/// Samples `k` candidates per prompt and pairs the best against the worst
/// under the gold RM (ties go to the earlier sample). Prompts whose samples
/// are all the same sequence yield no pair.
pub fn build_preference_pairs<S: Scalar>(
    policy: &PolicyCheckpoint<S>,
    prompts: &[Prompt],
    k: usize,
    rm: &GoldRewardModel,
    decode: Decode,
    seed: u64,
) -> Result<Vec<PreferenceExample>> {
    if k < 2 {
        return Err(Error::Config(format!("need k >= 2 candidates per prompt, got {k}")));
    }
    let per_prompt = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut cands = Vec::with_capacity(k);
            for j in 0..k {
                let r = sample_response(policy, prompt, decode, seed::derive(seed, &[i as u64, j as u64]))?;
                let score = gold_reward(rm, prompt, &r)?;
                cands.push((r, score));
            }
            pick_pair(prompt, &cands)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_prompt.into_iter().flatten().collect())
}

fn pick_pair(prompt: &Prompt, cands: &[(Response, f64)]) -> Result<Option<PreferenceExample>> {
    let mut best = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.1 > cands[best].1 {
            best = i;
        }
    }
    // Lowest reward among samples that differ from the chosen sequence.
    let mut worst: Option<usize> = None;
    for (i, c) in cands.iter().enumerate() {
        if c.0 != cands[best].0 && worst.is_none_or(|w| c.1 < cands[w].1) {
            worst = Some(i);
        }
    }
    match worst {
        None => Ok(None),
        Some(w) => {
            let (chosen, rc) = &cands[best];
            let (rejected, rr) = &cands[w];
            PreferenceExample::new(prompt.clone(), chosen.clone(), rejected.clone())?
                .with_rewards(*rc, *rr)
                .map(Some)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub p: f64,
    pub seed: u64,
}

/// Independently per example, swaps chosen and rejected with probability
/// `p` and marks the example flipped.
pub fn inject_label_noise(dataset: &[PreferenceExample], spec: NoiseSpec) -> Result<Vec<PreferenceExample>> {
    if !(0.0..=1.0).contains(&spec.p) {
        return Err(Error::Config(format!("noise_p must be in [0, 1], got {}", spec.p)));
    }
    let mut rng = seed::rng(spec.seed);
    Ok(dataset
        .iter()
        .map(|ex| {
            if rng.random::<f64>() < spec.p {
                ex.swapped()
            } else {
                ex.clone()
            }
        })
        .collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    prompt: Vec<Token>,
    chosen: Vec<Token>,
    rejected: Vec<Token>,
    flipped: bool,
    #[serde(default)]
    gold_reward_chosen: Option<f64>,
    #[serde(default)]
    gold_reward_rejected: Option<f64>,
}

pub fn to_jsonl(dataset: &[PreferenceExample]) -> String {
    let mut out = String::new();
    for ex in dataset {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<PreferenceExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let schema = |reason: String| Error::Schema { line: line_no, reason };
        let rec: Record = serde_json::from_value(value).map_err(|e| schema(e.to_string()))?;
        let ex = PreferenceExample {
            prompt: Prompt::new(rec.prompt).map_err(|e| schema(e.to_string()))?,
            chosen: Response::new(rec.chosen).map_err(|e| schema(e.to_string()))?,
            rejected: Response::new(rec.rejected).map_err(|e| schema(e.to_string()))?,
            flipped: rec.flipped,
            gold_reward_chosen: rec.gold_reward_chosen,
            gold_reward_rejected: rec.gold_reward_rejected,
        };
        ex.check().map_err(|e| schema(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, dataset: &[PreferenceExample]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(dataset).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PreferenceExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}
