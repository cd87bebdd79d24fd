mod common;

use crnn::training::{grad_check, layer_grad_check, DEFAULT_FD_STEP};

const SEEDS: [u64; 3] = [1, 2, 3];

#[test]
fn every_layer_combination_matches_finite_differences() {
    for (name, cfg) in common::layer_cases() {
        for seed in SEEDS {
            let r = layer_grad_check(&cfg, 2, seed).unwrap();
            assert!(
                r.max_rel_error() < 1e-5,
                "{name} seed {seed}: max {:.3e}, failures {:?}",
                r.max_rel_error(),
                r.failures
            );
            assert!(r.tensors.iter().all(|t| t.checked > 0));
        }
    }
}

#[test]
fn toy_models_match_finite_differences() {
    for (name, cfg) in common::toy_models() {
        for seed in SEEDS {
            let r = grad_check(&cfg, seed, DEFAULT_FD_STEP).unwrap();
            assert!(
                r.max_rel_error() < 1e-5,
                "{name} seed {seed}: max {:.3e}, failures {:?}",
                r.max_rel_error(),
                r.failures
            );
        }
    }
}

#[test]
fn emotion_framing_lengths() {
    let cfg = crnn::model::ModelConfig::emotion(3, 2);
    assert_eq!(cfg.min_len(), 31);
    assert_eq!(cfg.min_len_for(2), 47);
}
