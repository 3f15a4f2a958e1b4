use maria_core::data::checkpoint::{Checkpoint, ToCheckpoint};
use maria_core::data::tokenizer::{TokenId, BYTE_VOCAB, VOCAB_SIZE};
use maria_core::numerics::ops;
use maria_core::transformer::{AttentionMode, ModelConfig, TransformerModel};
use maria_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(attention: AttentionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 48,
        attention,
        ffn_mult: 2,
    }
}

fn random_tokens(rng: &mut impl Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(0..BYTE_VOCAB as TokenId)).collect()
}

#[test]
fn causal_hidden_depends_only_on_prefix() {
    let m = TransformerModel::with_init_std(small(AttentionMode::Causal), 1, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let toks = random_tokens(&mut rng, 20);
    let full = m.forward_hidden(&toks).unwrap();
    for i in [0, 5, 19] {
        let prefix = m.forward_hidden(&toks[..=i]).unwrap();
        for r in 0..=i {
            for (a, b) in full.row(r).iter().zip(prefix.row(r)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn bidirectional_hidden_sees_the_future() {
    let m = TransformerModel::with_init_std(small(AttentionMode::Bidirectional), 1, 0.2).unwrap();
    let mut toks: Vec<TokenId> = b"hello world".iter().map(|&b| b as TokenId).collect();
    let before = m.forward_hidden(&toks).unwrap();
    *toks.last_mut().unwrap() = b'?' as TokenId;
    let after = m.forward_hidden(&toks).unwrap();
    assert!(before.row(0) != after.row(0));
}

#[test]
fn forward_is_deterministic_and_rows_are_distributions() {
    let m = TransformerModel::new(small(AttentionMode::Causal), 3).unwrap();
    let toks: Vec<TokenId> = (0..30).collect();
    let a = m.forward_logits(&toks).unwrap();
    let b = m.forward_logits(&toks).unwrap();
    assert_eq!(a.data(), b.data());
    let p = ops::softmax(&a);
    for r in 0..p.rows() {
        let s: f64 = p.row(r).iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn untrained_entropy_is_near_uniform() {
    let ln_v = (VOCAB_SIZE as f64).ln();
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let m = TransformerModel::new(ModelConfig::new(mode), 4).unwrap();
        let toks: Vec<TokenId> = b"the quick brown fox".iter().map(|&b| b as TokenId).collect();
        let p = ops::softmax(&m.forward_logits(&toks).unwrap());
        for r in 0..p.rows() {
            let h: f64 = p.row(r).iter().map(|&x| -(x as f64) * (x as f64).ln()).sum();
            assert!((h - ln_v).abs() <= 0.1 * ln_v, "entropy {h}");
        }
    }
}

#[test]
fn argmax_ignores_constant_shift() {
    let m = TransformerModel::new(small(AttentionMode::Causal), 5).unwrap();
    let logits = m.forward_logits(&[1, 2, 3]).unwrap();
    for r in 0..logits.rows() {
        let shifted: Vec<f32> = logits.row(r).iter().map(|x| x + 7.5).collect();
        assert_eq!(ops::argmax(logits.row(r)), ops::argmax(&shifted));
    }
}

#[test]
fn cached_matches_full_forward_on_random_splits() {
    let m = TransformerModel::with_init_std(small(AttentionMode::Causal), 6, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(1..=48);
        let split = rng.random_range(0..=n);
        let toks = random_tokens(&mut rng, n);
        let full = m.forward_hidden(&toks).unwrap();
        let mut cache = m.new_cache();
        let a = m.forward_cached(&toks[..split], &mut cache).unwrap();
        let b = m.forward_cached(&toks[split..], &mut cache).unwrap();
        assert_eq!(cache.len(), n);
        let mut rows = a.data().to_vec();
        rows.extend_from_slice(b.data());
        let dev = full.data().iter().zip(&rows).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(dev <= 1e-4, "deviation {dev}");
    }
}

#[test]
fn token_by_token_equals_full_forward() {
    let m = TransformerModel::with_init_std(small(AttentionMode::Causal), 8, 0.1).unwrap();
    let toks: Vec<TokenId> = b"0123456789".iter().map(|&b| b as TokenId).collect();
    let full = m.forward_hidden(&toks).unwrap();
    let mut cache = m.new_cache();
    for (i, t) in toks.iter().enumerate() {
        let h = m.forward_cached(std::slice::from_ref(t), &mut cache).unwrap();
        for (a, b) in h.data().iter().zip(full.row(i)) {
            assert!((a - b).abs() <= 1e-4);
        }
    }
    let mut fresh = m.new_cache();
    assert_eq!(m.forward_cached(&toks, &mut fresh).unwrap().data(), full.data());
}

#[test]
fn empty_cached_step_is_identity() {
    let m = TransformerModel::new(small(AttentionMode::Causal), 9).unwrap();
    let mut cache = m.new_cache();
    m.forward_cached(&[1, 2], &mut cache).unwrap();
    let before = cache.clone();
    let h = m.forward_cached(&[], &mut cache).unwrap();
    assert_eq!(h.rows(), 0);
    assert_eq!(cache, before);
}

#[test]
fn bidirectional_cache_is_a_mode_error() {
    let m = TransformerModel::new(small(AttentionMode::Bidirectional), 9).unwrap();
    let mut cache = m.new_cache();
    assert!(matches!(m.forward_cached(&[1], &mut cache), Err(Error::Mode(_))));
}

#[test]
fn overlong_input_is_length_error() {
    let m = TransformerModel::new(small(AttentionMode::Causal), 9).unwrap();
    let toks = vec![1; 49];
    assert!(matches!(m.forward_hidden(&toks), Err(Error::Length { len: 49, max: 48 })));
    let mut cache = m.new_cache();
    m.forward_cached(&toks[..40], &mut cache).unwrap();
    assert!(matches!(m.forward_cached(&toks[..9], &mut cache), Err(Error::Length { .. })));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let m = TransformerModel::new(small(mode), 10).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        m.save(&p1).unwrap();
        let back = TransformerModel::load(&p1).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}

#[test]
fn loading_wrong_kind_is_typed_error() {
    let m = TransformerModel::new(small(AttentionMode::Causal), 10).unwrap();
    let mut ckpt = m.to_checkpoint().unwrap();
    ckpt.kind = maria_core::data::CheckpointKind::Mlm;
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(TransformerModel::from_checkpoint(back), Err(Error::KindMismatch { .. })));
}

#[test]
fn frozen_model_rejects_gradients() {
    let mut m = TransformerModel::new(small(AttentionMode::Causal), 11).unwrap();
    m.freeze();
    assert!(m.params().iter().all(|p| !p.requires_grad()));
    let g = vec![0.0; m.head.numel()];
    assert!(m.head.accumulate_grad(&g).is_err());
}
