use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::Tensor;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        model_dim: 16,
        n_layers: 2,
        n_heads: 2,
        context_len: 16,
        lora_rank: 2,
        lora_alpha: 4.0,
        lora_targets: Projection::ALL.to_vec(),
    }
}

fn perturb_lora(state: &mut ModelState, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in lora_values_mut(state.lora.as_mut().unwrap()) {
        *t = Tensor::randn(t.shape(), std, &mut rng);
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<usize> {
    let len = rng.gen_range(1..=cfg.context_len);
    (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect()
}

#[test]
fn fresh_lora_is_a_no_op() {
    for seed in [0, 1, 7] {
        let state = init_model(&small(), seed).unwrap();
        let toks = [1, 5, 3, 3, 0, 11];
        let on = log_probs(&state, &toks, true).unwrap();
        let off = log_probs(&state, &toks, false).unwrap();
        assert!(on.max_abs_diff(&off) <= 1e-12);
    }
}

#[test]
fn init_is_deterministic_in_seed() {
    let a = init_model(&small(), 42).unwrap();
    let b = init_model(&small(), 42).unwrap();
    assert_eq!(a, b);
    for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
        assert!(x.bit_eq(y));
    }
    let c = init_model(&small(), 43).unwrap();
    assert!(!a.backbone.blocks[0].wq.bit_eq(&c.backbone.blocks[0].wq));
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = ModelConfig {
        lora_alpha: 0.0,
        ..small()
    };
    assert!(matches!(init_model(&cfg, 0), Err(crate::Error::Config(_))));
}

#[test]
fn lora_forward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);

    // B = 0 leaves Wx.
    let out = lora_forward(&w, &a, &Tensor::zeros(&[3, 2]), 7.0, 2, &x).unwrap();
    let wx = crate::diff::kernels::matmul_t(&x, &w).unwrap();
    assert!(out.bit_eq(&wx));

    // W = 0 and α = r leaves BAx.
    let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let out = lora_forward(&Tensor::zeros(&[3, 3]), &a, &b, 2.0, 2, &x).unwrap();
    let ba = crate::diff::kernels::matmul(&b, &a).unwrap();
    let bax = crate::diff::kernels::matmul_t(&x, &ba).unwrap();
    assert!(out.max_abs_diff(&bax) < 1e-14);

    // Hand-computed: r=1, d=2, W=I, α=2, A=[[1,0]], B=[[1],[0]], x=[3,4] -> [9,4].
    let out = lora_forward(
        &Tensor::identity(2),
        &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
        &Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
        2.0,
        1,
        &Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(),
    )
    .unwrap();
    assert_eq!(out.data(), &[9.0, 4.0]);
}

#[test]
fn lora_forward_rejects_bad_shapes() {
    let err = lora_forward(
        &Tensor::identity(2),
        &Tensor::zeros(&[1, 3]),
        &Tensor::zeros(&[2, 1]),
        1.0,
        1,
        &Tensor::zeros(&[1, 2]),
    );
    assert!(matches!(err, Err(crate::Error::Shape { .. })));
}

#[test]
fn log_prob_rows_are_distributions() {
    let mut state = init_model(&small(), 5).unwrap();
    perturb_lora(&mut state, 6, 0.3);
    let lp = log_probs(&state, &[0, 1, 2, 3, 4, 5, 6, 7], true).unwrap();
    assert_eq!(lp.shape(), &[8, 12]);
    for t in 0..8 {
        let s: f64 = lp.row(t).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn overlong_sequence_is_a_length_error() {
    let state = init_model(&small(), 0).unwrap();
    let toks = vec![1; 17];
    assert!(matches!(
        log_probs(&state, &toks, true),
        Err(crate::Error::Length { len: 17, max: 16 })
    ));
}

#[test]
fn disabled_pass_ignores_lora_bitwise() {
    let base = init_model(&small(), 9).unwrap();
    let toks = [3, 1, 4, 1, 5, 9, 2, 6];
    let reference = log_probs(&base, &toks, false).unwrap();
    for seed in 0..4 {
        let mut s = base.clone();
        perturb_lora(&mut s, seed, 10.0);
        assert!(log_probs(&s, &toks, false).unwrap().bit_eq(&reference));
    }
    let mut stripped = base.clone();
    stripped.lora = None;
    assert!(log_probs(&stripped, &toks, true).unwrap().bit_eq(&reference));
}

#[test]
fn merge_with_zero_b_is_bitwise_identity() {
    let state = init_model(&small(), 11).unwrap();
    let (merged, status) = merge_lora(&state);
    assert_eq!(status, MergeStatus::Merged);
    assert!(merged.lora.is_none());
    for ((_, a), (_, b)) in state.backbone.named().iter().zip(merged.backbone.named()) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn merge_matches_augmented_forward() {
    let mut state = init_model(&small(), 12).unwrap();
    perturb_lora(&mut state, 13, 0.2);
    let (merged, _) = merge_lora(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..32 {
        let toks = random_tokens(&mut rng, &state.config);
        let aug = log_probs(&state, &toks, true).unwrap();
        let mer = log_probs(&merged, &toks, true).unwrap();
        assert!(aug.max_abs_diff(&mer) <= 1e-9);
    }
}

#[test]
fn merge_is_idempotent() {
    let mut state = init_model(&small(), 15).unwrap();
    perturb_lora(&mut state, 16, 0.2);
    let (once, _) = merge_lora(&state);
    let (twice, status) = merge_lora(&once);
    assert_eq!(status, MergeStatus::AlreadyMerged);
    assert_eq!(once, twice);
}

#[test]
fn trainable_count_formula() {
    let cfg = ModelConfig {
        vocab_size: 20,
        model_dim: 32,
        n_layers: 2,
        n_heads: 4,
        context_len: 16,
        lora_rank: 5,
        lora_alpha: 5.0,
        lora_targets: Projection::ALL.to_vec(),
    };
    let count = |cfg: &ModelConfig| -> usize {
        let s = init_model(cfg, 0).unwrap();
        trainable_parameters(&s).unwrap().iter().map(|(_, t)| t.numel()).sum()
    };
    assert_eq!(count(&cfg), 2560);
    assert_eq!(
        count(&ModelConfig {
            lora_rank: 10,
            ..cfg.clone()
        }),
        5120
    );
    let none = ModelConfig {
        lora_targets: vec![],
        ..cfg.clone()
    };
    assert!(trainable_parameters(&init_model(&none, 0).unwrap()).unwrap().is_empty());

    let (merged, _) = merge_lora(&init_model(&cfg, 0).unwrap());
    assert!(matches!(trainable_parameters(&merged), Err(crate::Error::Contract(_))));
}

#[test]
fn rank_is_neutral_at_init() {
    let toks = [2, 7, 1, 8, 2, 8];
    let mut state = init_model(&small(), 17).unwrap();
    let before = log_probs(&state, &toks, true).unwrap();
    state.reshape_lora(7, 4.0, 18).unwrap();
    assert!(log_probs(&state, &toks, true).unwrap().bit_eq(&before));
}

#[test]
fn greedy_decode_stops_and_respects_budget() {
    let state = init_model(&small(), 19).unwrap();
    let out = greedy_decode(&state, &[1, 2, 3], 4, usize::MAX).unwrap();
    assert_eq!(out.len(), 4);
    // Context of 16 caps generation.
    let out = greedy_decode(&state, &[1; 14], 10, usize::MAX).unwrap();
    assert_eq!(out.len(), 2);
    // The first greedy token agrees with the argmax of the full forward pass.
    let lp = log_probs(&state, &[1, 2, 3], true).unwrap();
    let first = greedy_decode(&state, &[1, 2, 3], 1, usize::MAX).unwrap()[0];
    assert_eq!(first, argmax(lp.row(2)));
}

#[test]
fn checkpoint_round_trip_is_bitwise_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = init_model(&small(), 20).unwrap();
    perturb_lora(&mut state, 21, 0.5);
    let ck = Checkpoint::new(state).with_meta("seed", 20);
    ck.save(&dir.path().join("a")).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("a")).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(&dir.path().join("b")).unwrap();
    for f in ["manifest.txt", "weights.bin"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs after round trip");
    }

    let (merged, _) = merge_lora(&loaded.state);
    Checkpoint::new(merged.clone()).save(&dir.path().join("m")).unwrap();
    assert_eq!(Checkpoint::load(&dir.path().join("m")).unwrap().state, merged);
}

#[test]
fn checkpoint_rejects_truncated_weights() {
    let dir = tempfile::tempdir().unwrap();
    let state = init_model(&small(), 22).unwrap();
    Checkpoint::new(state).save(dir.path()).unwrap();
    let w = dir.path().join("weights.bin");
    let bytes = std::fs::read(&w).unwrap();
    std::fs::write(&w, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(crate::Error::Checkpoint(_))));
}
