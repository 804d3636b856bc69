//! Gold-RM based evaluation: head-to-head win rates, mean reward,
//! length-controlled win rate and DPO implicit-reward margins.
//!
//! All decoding here is greedy, so every metric is a pure function of its
//! checkpoints, prompts and gold RM.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gold_reward, GoldRewardModel, PreferenceExample, PromptDistribution};
use crate::dpo::ensure_same_spec;
use crate::error::{Error, Result};
use crate::policy::{log_prob, sample_response, Decode, PolicyCheckpoint, Prompt};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_prompts_id: usize,
    pub n_prompts_ood: usize,
    pub ood_distribution: PromptDistribution,
    pub lc_gamma: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_prompts_id: 200,
            n_prompts_ood: 200,
            ood_distribution: PromptDistribution::SkewedZipf { s: 1.5 },
            lc_gamma: 0.05,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts_id < 1 {
            return Err(Error::validation("eval.n_prompts_id", "must be >= 1"));
        }
        if self.n_prompts_ood < 1 {
            return Err(Error::validation("eval.n_prompts_ood", "must be >= 1"));
        }
        if !(self.lc_gamma >= 0.0 && self.lc_gamma.is_finite()) {
            return Err(Error::validation("eval.lc_gamma", "must be >= 0"));
        }
        if let PromptDistribution::SkewedZipf { s } = self.ood_distribution {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::validation("eval.ood_distribution.s", "must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Gold reward and length of the greedy response for each prompt.
pub fn greedy_outcomes<S: Scalar>(
    policy: &PolicyCheckpoint<S>,
    prompts: &[Prompt],
    rm: &GoldRewardModel,
) -> Result<Vec<(f64, usize)>> {
    if prompts.is_empty() {
        return Err(Error::Input("no evaluation prompts".into()));
    }
    if policy.spec().vocab_size != rm.vocab_size() {
        return Err(Error::Input(format!(
            "policy vocab {} differs from gold RM vocab {}",
            policy.spec().vocab_size,
            rm.vocab_size()
        )));
    }
    let decode = Decode::greedy(policy.spec().max_response_len);
    prompts
        .par_iter()
        .map(|p| {
            let r = sample_response(policy, p, decode, 0)?;
            Ok((gold_reward(rm, p, &r)?, r.len()))
        })
        .collect()
}

/// Share of comparisons won, ties counting one half.
///
/// The larger of the two complementary rates is computed as one minus the
/// smaller, which makes `rate(a, b) + rate(b, a) == 1` hold exactly.
fn head_to_head(candidate: &[f64], baseline: &[f64]) -> f64 {
    let (mut wins, mut losses) = (0usize, 0usize);
    for (c, b) in candidate.iter().zip(baseline) {
        match c.partial_cmp(b) {
            Some(Ordering::Greater) => wins += 1,
            Some(Ordering::Less) => losses += 1,
            _ => {}
        }
    }
    let n = candidate.len();
    let ties = n - wins - losses;
    let rate = |w: usize| (2 * w + ties) as f64 / (2 * n) as f64;
    if wins <= losses {
        rate(wins)
    } else {
        1.0 - rate(losses)
    }
}

pub fn win_rate<S: Scalar>(
    candidate: &PolicyCheckpoint<S>,
    baseline: &PolicyCheckpoint<S>,
    prompts: &[Prompt],
    rm: &GoldRewardModel,
) -> Result<f64> {
    let c: Vec<f64> = greedy_outcomes(candidate, prompts, rm)?
        .into_iter()
        .map(|o| o.0)
        .collect();
    let b: Vec<f64> = greedy_outcomes(baseline, prompts, rm)?
        .into_iter()
        .map(|o| o.0)
        .collect();
    Ok(head_to_head(&c, &b))
}

/// Win rate on `gold_reward - lc_gamma * |y|`.
pub fn lc_win_rate<S: Scalar>(
    candidate: &PolicyCheckpoint<S>,
    baseline: &PolicyCheckpoint<S>,
    prompts: &[Prompt],
    rm: &GoldRewardModel,
    cfg: &EvalConfig,
) -> Result<f64> {
    let adjust = |o: (f64, usize)| o.0 - cfg.lc_gamma * o.1 as f64;
    let c: Vec<f64> = greedy_outcomes(candidate, prompts, rm)?
        .into_iter()
        .map(adjust)
        .collect();
    let b: Vec<f64> = greedy_outcomes(baseline, prompts, rm)?
        .into_iter()
        .map(adjust)
        .collect();
    Ok(head_to_head(&c, &b))
}

pub fn mean_gold_reward<S: Scalar>(
    policy: &PolicyCheckpoint<S>,
    prompts: &[Prompt],
    rm: &GoldRewardModel,
) -> Result<f64> {
    let outcomes = greedy_outcomes(policy, prompts, rm)?;
    Ok(outcomes.iter().map(|o| o.0).sum::<f64>() / outcomes.len() as f64)
}

/// Per example, `beta * (log pi(y|x) - log ref(y|x))` for the chosen and the
/// rejected response.
pub fn implicit_reward_margins<S: Scalar>(
    policy: &PolicyCheckpoint<S>,
    reference: &PolicyCheckpoint<S>,
    dataset: &[PreferenceExample],
    beta: f64,
) -> Result<Vec<(S, S)>> {
    ensure_same_spec(policy, reference)?;
    let beta = S::of(beta);
    dataset
        .par_iter()
        .map(|ex| {
            let c = log_prob(policy, &ex.prompt, &ex.chosen)? - log_prob(reference, &ex.prompt, &ex.chosen)?;
            let r = log_prob(policy, &ex.prompt, &ex.rejected)? - log_prob(reference, &ex.prompt, &ex.rejected)?;
            Ok((beta * c, beta * r))
        })
        .collect()
}

/// Mean chosen and mean rejected implicit reward.
pub fn mean_margins<S: Scalar>(pairs: &[(S, S)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let n = pairs.len() as f64;
    let c = pairs.iter().map(|p| p.0.to_f64_lossy()).sum::<f64>() / n;
    let r = pairs.iter().map(|p| p.1.to_f64_lossy()).sum::<f64>() / n;
    (c, r)
}

/// One row of the metrics CSV. Summary rows fill the metric columns;
/// margin rows fill `step`, `chosen_reward` and `rejected_reward`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub round: usize,
    pub strategy: String,
    pub noise_p: f64,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub win_rate: Option<f64>,
    pub ood_win_rate: Option<f64>,
    pub gold_reward: Option<f64>,
    pub ood_gold_reward: Option<f64>,
    pub lc_win_rate: Option<f64>,
    pub step: Option<u64>,
    pub chosen_reward: Option<f64>,
    pub rejected_reward: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
    }
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)
            .map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Format(format!("metrics csv: {e}")))
}

pub const METRICS_HEADER: [&str; 14] = [
    "run_id",
    "round",
    "strategy",
    "noise_p",
    "lambda",
    "seed",
    "win_rate",
    "ood_win_rate",
    "gold_reward",
    "ood_gold_reward",
    "lc_win_rate",
    "step",
    "chosen_reward",
    "rejected_reward",
];

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("metrics csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_prompts, PromptDistribution};
    use crate::policy::{build_model, Init, ModelSpec, Response, Token, EOS};
    use proptest::prelude::*;

    fn prompts(n: usize, v: usize) -> Vec<Prompt> {
        generate_prompts(n, 3, v, 11, PromptDistribution::UniformNonEos).unwrap()
    }

    /// Prompts built from token 1 only, so scripted bodies avoiding token 1
    /// never collide with a prompt context.
    fn ones(n: usize) -> Vec<Prompt> {
        (0..n).map(|i| Prompt::new(vec![1; 1 + i % 3]).unwrap()).collect()
    }

    /// Bigram policy that deterministically emits `body` then EOS after a
    /// prompt ending in a token outside `body`. Body tokens must be distinct.
    fn scripted(v: usize, body: &[Token], max_len: usize) -> PolicyCheckpoint<f64> {
        let mut params = vec![0.0; v * v];
        let mut set = |ctx: usize, next: usize| {
            for u in 0..v {
                params[ctx * v + u] = if u == next { 10.0 } else { -10.0 };
            }
        };
        let first = body.first().copied().unwrap_or(EOS) as usize;
        for ctx in 0..v {
            set(ctx, first);
        }
        for w in body.windows(2) {
            set(w[0] as usize, w[1] as usize);
        }
        if let Some(&last) = body.last() {
            set(last as usize, EOS as usize);
        }
        PolicyCheckpoint::new(ModelSpec::tabular(v, max_len), params, 0, "scripted").unwrap()
    }

    #[test]
    fn self_comparison_is_half() {
        let m = build_model::<f64>(ModelSpec::tiny(6, 2, 3, 4, 6), Init::SeededNormal { stddev: 1.0 }, 1).unwrap();
        let rm = GoldRewardModel::new(6, 2, 0.05).unwrap();
        let ps = prompts(50, 6);
        assert_eq!(win_rate(&m, &m, &ps, &rm).unwrap(), 0.5);
        assert_eq!(lc_win_rate(&m, &m, &ps, &rm, &EvalConfig::default()).unwrap(), 0.5);
        assert!(win_rate(&m, &m, &[], &rm).is_err());
    }

    #[test]
    fn dominating_policy_wins_everything() {
        // Table rewards only the transition into token 2.
        let v = 4;
        let mut table = vec![0.0; v * v];
        for ctx in 0..v {
            table[ctx * v + 2] = 1.0;
        }
        let rm = GoldRewardModel::from_table(v, table, 0.05).unwrap();
        let bad = scripted(v, &[], 4);
        let good = scripted(v, &[2], 4);
        let ps = ones(40);
        assert_eq!(win_rate(&good, &bad, &ps, &rm).unwrap(), 1.0);
        assert_eq!(win_rate(&bad, &good, &ps, &rm).unwrap(), 0.0);
    }

    #[test]
    fn length_control_isolates_length() {
        // All transitions score 0 and there is no length penalty, so every
        // response has reward 0; the candidate's responses are longer.
        let v = 5;
        let rm = GoldRewardModel::from_table(v, vec![0.0; v * v], 0.0).unwrap();
        let long = scripted(v, &[3, 4], 5);
        let short = scripted(v, &[3], 5);
        let ps = ones(30);
        let cfg = EvalConfig {
            lc_gamma: 0.05,
            ..EvalConfig::default()
        };
        assert_eq!(win_rate(&long, &short, &ps, &rm).unwrap(), 0.5);
        assert_eq!(lc_win_rate(&long, &short, &ps, &rm, &cfg).unwrap(), 0.0);
        let zero = EvalConfig { lc_gamma: 0.0, ..cfg };
        assert_eq!(
            lc_win_rate(&long, &short, &ps, &rm, &zero).unwrap(),
            win_rate(&long, &short, &ps, &rm).unwrap()
        );
    }

    #[test]
    fn mean_gold_reward_definition() {
        let v = 6;
        let zero = GoldRewardModel::from_table(v, vec![0.0; v * v], 0.05).unwrap();
        let pol = scripted(v, &[2, 3], 6);
        assert!((mean_gold_reward(&pol, &ones(20), &zero).unwrap() + 0.05 * 3.0).abs() < 1e-12);
        let ps = prompts(20, v);

        let rm = GoldRewardModel::new(v, 5, 0.05).unwrap();
        let m = build_model::<f64>(ModelSpec::tiny(v, 2, 3, 4, 6), Init::SeededNormal { stddev: 1.0 }, 8).unwrap();
        let direct: Vec<f64> = ps
            .iter()
            .map(|p| {
                let r = sample_response(&m, p, Decode::greedy(6), 0).unwrap();
                gold_reward(&rm, p, &r).unwrap()
            })
            .collect();
        let mean = direct.iter().sum::<f64>() / direct.len() as f64;
        assert!((mean_gold_reward(&m, &ps, &rm).unwrap() - mean).abs() < 1e-12);
        assert_eq!(
            mean_gold_reward(&m, &ps, &rm).unwrap(),
            mean_gold_reward(&m.clone(), &ps, &rm).unwrap()
        );
    }

    #[test]
    fn margins_vanish_at_reference_and_scale_with_beta() {
        let spec = ModelSpec::tiny(5, 2, 2, 3, 5);
        let pol = build_model::<f64>(spec, Init::SeededNormal { stddev: 1.0 }, 1).unwrap();
        let rf = build_model::<f64>(spec, Init::SeededNormal { stddev: 1.0 }, 2).unwrap();
        let data = vec![PreferenceExample::new(
            Prompt::new(vec![1, 2]).unwrap(),
            Response::new(vec![3, 0]).unwrap(),
            Response::new(vec![4, 4, 0]).unwrap(),
        )
        .unwrap()];
        for (c, r) in implicit_reward_margins(&pol, &pol, &data, 0.1).unwrap() {
            assert_eq!((c, r), (0.0, 0.0));
        }
        let a = implicit_reward_margins(&pol, &rf, &data, 0.1).unwrap();
        let b = implicit_reward_margins(&pol, &rf, &data, 0.2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x.0, y.0);
            assert_eq!(2.0 * x.1, y.1);
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![
            MetricsRow {
                run_id: "r".into(),
                round: 1,
                strategy: "previous_policy".into(),
                noise_p: 0.3,
                lambda: Some(0.1),
                seed: 4,
                win_rate: Some(0.5),
                ..MetricsRow::default()
            },
            MetricsRow {
                run_id: "r".into(),
                round: 1,
                step: Some(3),
                chosen_reward: Some(0.25),
                rejected_reward: Some(-0.5),
                ..MetricsRow::default()
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "r,1,previous_policy,0.3,0.1,4,0.5,,,,,,,");
        assert_eq!(read_metrics_csv(&text).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn win_rates_are_complementary(
            c in proptest::collection::vec(-2i32..3, 1..60),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::seed::rng(seed);
            use rand::Rng;
            let b: Vec<f64> = c.iter().map(|_| rng.random_range(-2i32..3) as f64).collect();
            let c: Vec<f64> = c.iter().map(|&x| x as f64).collect();
            let ab = head_to_head(&c, &b);
            let ba = head_to_head(&b, &c);
            prop_assert_eq!(ab + ba, 1.0);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
