use std::path::Path;

use preflab::env::{sample_pair_dataset, sample_preference_dataset, EnvSpec};
use preflab::trainer::{fit_reference_policy, train_baseline, train_mpo, Method, Monitor, TrainConfig, TrainingData};
use preflab::{rng, TabularPolicy};

fn overfit_instance(seed: u64) -> (EnvSpec, TrainingData, TabularPolicy) {
    let spec = EnvSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("instances/overfit.json")).unwrap();
    let data = TrainingData {
        preferences: sample_preference_dataset(&spec.env, 100_000, seed).unwrap(),
        reference: sample_pair_dataset(&spec.env, &spec.sft_generator, 100_000, seed, rng::REFERENCE).unwrap(),
        pretrain: Vec::new(),
    };
    let sft = fit_reference_policy(&data.reference, spec.env.shape(), 1.0, 200_000, 1e-8).unwrap();
    assert!(sft.converged);
    (spec, data, sft.policy)
}

fn kl_at(metrics: &[preflab::MetricsRecord], step: usize) -> f64 {
    metrics.iter().find(|m| m.step == step).unwrap().kl_to_ref
}

/// KL growth between steps 10k and 20k for unregularized and regularized
/// unweighted MPO at step size 1.0.
fn kl_growth(seed: u64) -> (f64, f64) {
    let (spec, data, reference) = overfit_instance(seed);
    let monitor = Monitor { env: Some(&spec.env), reference: Some(&reference), ref_data: &data.reference };
    let mut cfg = TrainConfig::new(Method::Mpo, 20_000);
    cfg.step_size = 1.0;
    cfg.eval_every = 10_000;
    let free = train_mpo(&reference, &data, &cfg, &monitor).unwrap();
    cfg.beta = 0.5;
    let regularized = train_mpo(&reference, &data, &cfg, &monitor).unwrap();
    (
        kl_at(&free.metrics, 20_000) - kl_at(&free.metrics, 10_000),
        (kl_at(&regularized.metrics, 20_000) - kl_at(&regularized.metrics, 10_000)).abs(),
    )
}

#[test]
fn reference_term_makes_kl_plateau() {
    // Thresholds hold on the reference seed; other seeds keep the ordering.
    let (growth, plateau) = kl_growth(0);
    assert!(growth > 1.0, "unregularized growth {growth}");
    assert!(plateau < 0.05, "regularized change {plateau}");
    for seed in [1, 2] {
        let (growth, plateau) = kl_growth(seed);
        assert!(growth > 0.5 && plateau < 0.05 && growth > 100.0 * plateau, "seed {seed}: {growth} vs {plateau}");
    }
}

#[test]
fn dpo_margin_grows_monotonically_on_deterministic_data() {
    let (spec, data, reference) = overfit_instance(4);
    let mut cfg = TrainConfig::new(Method::Dpo, 20_000);
    cfg.beta = 0.2;
    cfg.eval_every = 1_000;
    let monitor = Monitor { env: Some(&spec.env), reference: Some(&reference), ref_data: &data.reference };
    let out = train_baseline(&reference, &reference, &data.preferences, &cfg, &monitor).unwrap();
    assert_eq!(out.metrics.len(), 21);
    // The implicit margin of the top pair, beta * (log-ratio gap), tracks the
    // largest logit; both must rise at every evaluation.
    for w in out.metrics.windows(2) {
        assert!(w[1].max_abs_logit > w[0].max_abs_logit);
        assert!(w[1].loss_rm < w[0].loss_rm);
    }
    let margin = |p: &TabularPolicy| {
        (p.log_prob(0, 5).unwrap() - reference.log_prob(0, 5).unwrap())
            - (p.log_prob(0, 3).unwrap() - reference.log_prob(0, 3).unwrap())
    };
    assert!(margin(&out.policy) > 20.0);
}

#[test]
fn checkpoints_match_a_shorter_run() {
    let (spec, data, reference) = overfit_instance(5);
    let monitor = Monitor { env: Some(&spec.env), reference: Some(&reference), ref_data: &data.reference };
    let mut cfg = TrainConfig::new(Method::Mpo, 400);
    cfg.beta = 0.5;
    cfg.weighted_iter_num = Some(100);
    cfg.pref_batch = 64;
    cfg.ref_batch = 64;
    cfg.checkpoint_every = 200;
    let long = train_mpo(&reference, &data, &cfg, &monitor).unwrap();
    assert_eq!(long.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![200, 400]);
    assert_eq!(long.checkpoints[1].1, long.policy);
    cfg.steps = 200;
    let short = train_mpo(&reference, &data, &cfg, &monitor).unwrap();
    assert_eq!(short.policy, long.checkpoints[0].1);
}
