mod common;

use common::*;
use tpmm::checkpoint;
use tpmm::config::{ExperimentConfig, PolicyInit, StrategyKind};
use tpmm::merge::{WeightDataSource, WeightLearnConfig};
use tpmm::pipeline::{next_reference, run_iterative, ReferenceStrategy, RunManifest};

#[test]
fn learned_reference_on_ab_corpus_is_checkpoint_a() {
    let (traj, data) = ab_construction(48, 7);
    let cfg = WeightLearnConfig {
        lambda: 0.0,
        steps: 500,
        ..WeightLearnConfig::default()
    };
    let (reference, learned) = next_reference(&ReferenceStrategy::LearnedWeights(cfg), &traj, &data).unwrap();
    let alpha = learned.unwrap().weights.alpha();
    assert!(alpha[0] >= 0.99, "{alpha:?}");
    // Merged table is (2 alpha_A - 1) A, so every coordinate sits near A.
    for (r, a) in reference.params().iter().zip(traj.first().params()) {
        assert!((r - (2.0 * alpha[0] - 1.0) * a).abs() < 1e-12);
    }
}

#[test]
fn round_one_is_identical_across_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for s in StrategyKind::ALL {
        let mut cfg = small_config(3, s, 1);
        cfg.run_id = s.name().into();
        let run = run_iterative(&cfg, Some(dir.path())).unwrap();
        let dir = run.run_dir.unwrap();
        bytes.push((
            std::fs::read(dir.join("round_1/policy.ckpt")).unwrap(),
            std::fs::read(dir.join("round_1/reference.ckpt")).unwrap(),
            std::fs::read(dir.join("round_1/train.jsonl")).unwrap(),
        ));
        assert_eq!(run.records[0].alpha.is_some(), s == StrategyKind::LearnedWeights);
    }
    assert!(bytes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn three_rounds_with_noise_structure() {
    let mut cfg = small_config(5, StrategyKind::LearnedWeights, 3);
    cfg.per_round.noise_p = 0.3;
    let run = run_iterative(&cfg, None).unwrap();
    assert_eq!(run.trajectory.len(), 4);
    assert_eq!(run.records.len(), 3);
    for (t, r) in run.records.iter().enumerate() {
        assert_eq!(r.round, t + 1);
        assert_eq!(r.alpha.as_ref().unwrap().len(), t + 1);
        assert!(r.flipped_pairs <= r.train_pairs);
        assert!(r.margin_trace.iter().all(|m| m.1.is_finite() && m.2.is_finite()));
        assert_eq!(r.margin_trace.len(), 2 * r.train_pairs.div_ceil(8) + 1);
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(11, StrategyKind::SimpleAverage, 2);
    cfg.run_id = "orig".into();
    let run = run_iterative(&cfg, Some(dir.path())).unwrap();
    let run_dir = run.run_dir.unwrap();
    let manifest = RunManifest::from_json(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(
        manifest.artifacts.iter().all(|a| run_dir.join(a).exists()),
        "{:?}",
        manifest.artifacts
    );
    assert_eq!(manifest.seeds.len(), 3);
    let mut again: ExperimentConfig = manifest.config().unwrap();
    assert_eq!(again, cfg.resolved());
    again.run_id = "again".into();
    let rerun = run_iterative(&again, Some(dir.path())).unwrap();
    for t in 0..=2 {
        let a = checkpoint::read(&run_dir.join(format!("round_{t}/policy.ckpt"))).unwrap();
        let b = checkpoint::read(&rerun.run_dir.as_ref().unwrap().join(format!("round_{t}/policy.ckpt"))).unwrap();
        assert_eq!(a.params(), b.params());
    }
}

#[test]
fn merged_init_and_held_out_weights_run() {
    let mut cfg = small_config(2, StrategyKind::LearnedWeights, 2);
    cfg.policy_init = PolicyInit::FromMergedReference;
    cfg.weights.dataset_source = WeightDataSource::HeldOutSplit { fraction: 0.5 };
    cfg.merge_include_sft = false;
    let run = run_iterative(&cfg, None).unwrap();
    // Round 2 merges only checkpoint 1 once the SFT model is excluded.
    assert_eq!(run.records[1].alpha.as_deref(), Some(&[1.0][..]));
    assert_eq!(run.trajectory.len(), 3);
}

#[test]
fn fixed_sft_reference_stays_at_checkpoint_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(4, StrategyKind::FixedSft, 3);
    let run = run_iterative(&cfg, Some(dir.path())).unwrap();
    let run_dir = run.run_dir.unwrap();
    let sft = std::fs::read(run_dir.join("round_0/policy.ckpt")).unwrap();
    for t in 1..=3 {
        let r = checkpoint::read(&run_dir.join(format!("round_{t}/reference.ckpt"))).unwrap();
        assert_eq!(r.params(), checkpoint::decode(&sft).unwrap().params());
    }
}
