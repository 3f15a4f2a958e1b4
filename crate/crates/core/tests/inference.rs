use maria_core::data::corpus::{CorpusShards, Window};
use maria_core::data::tokenizer::{TokenId, BOS, BYTE_VOCAB, MASK, VOCAB_SIZE};
use maria_core::fusion::{FusionHead, FusionInit};
use maria_core::inference::{
    generate_unconditional, infill_cached, infill_cached_with, infill_uncached, infill_uncached_with,
    mlm_iterative_decode, sample_token, serve_infill, simulated_anneal, AnnealSchedule, InfillOptions, InfillRequest,
    SamplerKind, SamplerSpec,
};
use maria_core::masking::{sample_mask, MaskMode, MaskSet};
use maria_core::numerics::ops;
use maria_core::training::{train_ar, TrainConfig};
use maria_core::transformer::{AttentionMode, ModelConfig, TransformerModel};
use maria_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(attention: AttentionMode, seq: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: seq,
        attention,
        ffn_mult: 2,
    }
}

struct Trio {
    ar: TransformerModel,
    mlm: TransformerModel,
    head: FusionHead,
}

/// Random-weight models with a larger init so distributions are peaked enough
/// for sampling differences to show up.
fn trio(seed: u64) -> Trio {
    let ar = TransformerModel::with_init_std(cfg(AttentionMode::Causal, 48), seed, 0.2).unwrap();
    let mlm = TransformerModel::with_init_std(cfg(AttentionMode::Bidirectional, 48), seed + 1, 0.2).unwrap();
    let head = FusionHead::new(FusionInit::Random, &ar, &mlm, seed + 2).unwrap();
    Trio { ar, mlm, head }
}

fn random_case(rng: &mut ChaCha8Rng, rate: f64, max_len: usize) -> (Vec<TokenId>, MaskSet) {
    let n = rng.random_range(1..=max_len);
    let tokens: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..256)).collect();
    let mask = sample_mask(n, rate, MaskMode::Bernoulli, rng);
    let mut masked = tokens;
    for &i in mask.indices() {
        masked[i] = MASK;
    }
    (masked, mask)
}

fn softmax64(logits: &[f32], t: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&x| ((x as f64 - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn tiny_temperature_agrees_with_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = SamplerSpec::temperature(1e-6, 0);
    for _ in 0..1000 {
        let logits: Vec<f32> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
        let g = ops::argmax(&logits) as TokenId;
        assert_eq!(sample_token(&logits, &spec, &mut rng).unwrap(), g);
    }
}

#[test]
fn full_nucleus_equals_temperature_on_shared_stream() {
    let mut gen = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let logits: Vec<f32> = (0..30).map(|_| gen.random_range(-3.0..3.0)).collect();
        let seed = gen.random();
        let a = sample_token(&logits, &SamplerSpec::temperature(0.8, 0), &mut ChaCha8Rng::seed_from_u64(seed));
        let b = sample_token(&logits, &SamplerSpec::nucleus(1.0, 0.8, 0), &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(a.unwrap(), b.unwrap());
    }
}

#[test]
fn temperature_frequencies_match_softmax() {
    let logits = [2.0f32, 1.0, 0.0, -1.0, 0.5];
    let t = 0.7;
    let p = softmax64(&logits, t);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 50_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_token(&logits, &SamplerSpec::temperature(t, 0), &mut rng).unwrap() as usize] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&p)
        .map(|(&c, &q)| (c as f64 - n as f64 * q).powi(2) / (n as f64 * q))
        .sum();
    // 4 degrees of freedom, 0.999 quantile
    assert!(chi2 < 18.47, "chi2 {chi2}");
}

#[test]
fn nucleus_draws_stay_in_the_nucleus() {
    let mut gen = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let logits: Vec<f32> = (0..20).map(|_| gen.random_range(-3.0..3.0)).collect();
        let p = softmax64(&logits, 1.0);
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
        let mut allowed = Vec::new();
        let mut mass = 0.0;
        for &i in &order {
            allowed.push(i);
            mass += p[i];
            if mass >= 0.6 {
                break;
            }
        }
        let spec = SamplerSpec::nucleus(0.6, 1.0, 0);
        for _ in 0..50 {
            let t = sample_token(&logits, &spec, &mut gen).unwrap() as usize;
            assert!(allowed.contains(&t), "{t} not in {allowed:?}");
        }
    }
}

#[test]
fn cached_matches_uncached_greedy() {
    let t = trio(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for rate in [0.1, 0.5, 0.9] {
        for _ in 0..20 {
            let (toks, mask) = random_case(&mut rng, rate, 48);
            let a = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &mask, &SamplerSpec::greedy()).unwrap();
            let b = infill_uncached(&t.ar, &t.mlm, &t.head, &toks, &mask, &SamplerSpec::greedy()).unwrap();
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.ar_forwards, mask.len());
            assert_eq!(b.ar_forwards, mask.len());
        }
    }
}

#[test]
fn cached_matches_uncached_with_shared_stream() {
    let t = trio(20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for spec in [SamplerSpec::temperature(0.9, 5), SamplerSpec::nucleus(0.9, 1.0, 6)] {
        for _ in 0..15 {
            let (toks, mask) = random_case(&mut rng, 0.5, 40);
            let a = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &mask, &spec).unwrap();
            let b = infill_uncached(&t.ar, &t.mlm, &t.head, &toks, &mask, &spec).unwrap();
            assert_eq!(a.tokens, b.tokens);
        }
    }
}

#[test]
fn infill_bookkeeping() {
    let t = trio(30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let (toks, mask) = random_case(&mut rng, 0.4, 48);
        let out = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &mask, &SamplerSpec::temperature(1.0, 2)).unwrap();
        assert!(out.tokens.iter().all(|&x| (x as usize) < BYTE_VOCAB));
        for i in (0..toks.len()).filter(|&i| !mask.contains(i)) {
            assert_eq!(out.tokens[i], toks[i]);
        }
        if let Some(&last) = mask.indices().last() {
            assert_eq!(out.mlm_forwards, 1);
            assert_eq!(out.ar_tokens, last + 1);
        }
    }
}

#[test]
fn empty_mask_is_identity_with_no_work() {
    let t = trio(40);
    let toks: Vec<TokenId> = b"hello".iter().map(|&b| b as TokenId).collect();
    let m = MaskSet::empty(5);
    let out = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &m, &SamplerSpec::greedy()).unwrap();
    assert_eq!(out.tokens, toks);
    assert_eq!((out.ar_forwards, out.mlm_forwards), (0, 0));
    let d = mlm_iterative_decode(&t.mlm, &toks, &m, &SamplerSpec::greedy()).unwrap();
    assert_eq!(d.tokens, toks);
}

#[test]
fn stray_mask_token_is_rejected() {
    let t = trio(41);
    let toks = vec![104, MASK, 105, MASK];
    let m = MaskSet::new(vec![1], 4).unwrap();
    for r in [
        infill_cached(&t.ar, &t.mlm, &t.head, &toks, &m, &SamplerSpec::greedy()),
        infill_uncached(&t.ar, &t.mlm, &t.head, &toks, &m, &SamplerSpec::greedy()),
        mlm_iterative_decode(&t.mlm, &toks, &m, &SamplerSpec::greedy()),
    ] {
        assert!(matches!(r, Err(Error::InputConsistency { index: 3 })));
    }
}

#[test]
fn too_long_input_is_length_error() {
    let t = trio(42);
    let toks = vec![MASK; 49];
    let r = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &MaskSet::full(49), &SamplerSpec::greedy());
    assert!(matches!(r, Err(Error::Length { len: 49, max: 48 })));
}

#[test]
fn all_masked_first_position_uses_bos_state() {
    let t = trio(43);
    let n = 12;
    let toks = vec![MASK; n];
    let out = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &MaskSet::full(n), &SamplerSpec::greedy()).unwrap();
    let h1 = t.ar.forward_hidden(&[BOS]).unwrap();
    let h2 = t.mlm.forward_hidden(&toks).unwrap();
    let logits = t.head.logits_row(h1.row(0), h2.row(0)).unwrap();
    assert_eq!(out.tokens[0] as usize, ops::argmax(&logits[..BYTE_VOCAB]));
    assert_eq!(out.ar_tokens, n);
}

#[test]
fn mlm_state_is_computed_once_unless_refreshed() {
    let t = trio(44);
    let toks = vec![MASK; 10];
    let m = MaskSet::full(10);
    let plain = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &m, &SamplerSpec::greedy()).unwrap();
    assert_eq!(plain.mlm_forwards, 1);
    let opts = InfillOptions {
        refresh_every: Some(3),
    };
    let g = SamplerSpec::greedy();
    let a = infill_cached_with(&t.ar, &t.mlm, &t.head, &toks, &m, &g, &opts, &mut g.rng()).unwrap();
    let b = infill_uncached_with(&t.ar, &t.mlm, &t.head, &toks, &m, &g, &opts, &mut g.rng()).unwrap();
    assert_eq!(a.mlm_forwards, 4);
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn mlm_decode_counts_and_single_position() {
    let t = trio(45);
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let (toks, mask) = random_case(&mut rng, 0.5, 30);
    let out = mlm_iterative_decode(&t.mlm, &toks, &mask, &SamplerSpec::greedy()).unwrap();
    assert_eq!(out.mlm_forwards, mask.len());
    assert_eq!(out.ar_forwards, 0);

    let mut one: Vec<TokenId> = b"the cat sat".iter().map(|&b| b as TokenId).collect();
    one[4] = MASK;
    let m = MaskSet::new(vec![4], one.len()).unwrap();
    let out = mlm_iterative_decode(&t.mlm, &one, &m, &SamplerSpec::greedy()).unwrap();
    let logits = t.mlm.forward_logits(&one).unwrap();
    assert_eq!(out.tokens[4] as usize, ops::argmax(&logits.row(4)[..BYTE_VOCAB]));
    assert!(mlm_iterative_decode(&t.ar, &one, &m, &SamplerSpec::greedy()).is_err());
}

#[test]
fn generation_edges() {
    let t = trio(47);
    assert!(generate_unconditional(&t.ar, 0, &SamplerSpec::greedy()).unwrap().is_empty());
    let a = generate_unconditional(&t.ar, 20, &SamplerSpec::greedy()).unwrap();
    assert_eq!(a, generate_unconditional(&t.ar, 20, &SamplerSpec::greedy()).unwrap());
    assert!(a.iter().all(|&x| (x as usize) < BYTE_VOCAB));
    assert!(matches!(
        generate_unconditional(&t.ar, 49, &SamplerSpec::greedy()),
        Err(Error::Length { .. })
    ));
    assert!(generate_unconditional(&t.mlm, 4, &SamplerSpec::greedy()).is_err());
}

#[test]
fn generation_reproduces_a_memorised_pattern() {
    let pattern: Vec<TokenId> = b"abcdefghij klmnop qrstuv wxyz ABCDEFGHIJ KLMNOP QRSTUV WXYZ 0123"
        .iter()
        .map(|&b| b as TokenId)
        .collect();
    let w = Window {
        tokens: pattern.clone(),
        source: 0,
        offset: 0,
    };
    let corpus = CorpusShards {
        window_len: 64,
        sources: vec!["<pattern>".into()],
        train: vec![w.clone(); 32],
        holdout: vec![w],
    };
    let tc = TrainConfig {
        steps: 300,
        batch_size: 8,
        micro_batch: 8,
        lr: 3e-3,
        seed: 1,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let (ar, _) = train_ar(cfg(AttentionMode::Causal, 64), &corpus, &tc).unwrap();
    let mut correct = 0;
    let runs = 10;
    for seed in 0..runs {
        let s = generate_unconditional(&ar, 64, &SamplerSpec::temperature(1.0, seed)).unwrap();
        correct += s.iter().zip(&pattern).filter(|(a, b)| a == b).count();
    }
    let acc = correct as f64 / (64 * runs) as f64;
    assert!(acc > 0.9, "accuracy {acc}");
}

#[test]
fn anneal_trace_shape() {
    let t = trio(50);
    let none = AnnealSchedule {
        iterations: 0,
        remask_fraction: 0.3,
        seed: 9,
    };
    let r = simulated_anneal(&t.ar, &t.mlm, &t.head, 24, &none).unwrap();
    assert_eq!(r.trace.len(), 1);
    assert_eq!(
        r.tokens,
        generate_unconditional(&t.ar, 24, &SamplerSpec::temperature(1.0, 9)).unwrap()
    );

    let s = AnnealSchedule {
        iterations: 4,
        remask_fraction: 0.3,
        seed: 9,
    };
    let r = simulated_anneal(&t.ar, &t.mlm, &t.head, 24, &s).unwrap();
    assert_eq!(r.trace.len(), 5);
    assert_eq!(r.trace[0], generate_unconditional(&t.ar, 24, &SamplerSpec::temperature(1.0, 9)).unwrap());
    assert_eq!(*r.temperatures.last().unwrap(), 0.0);
    assert_eq!(r.tokens, *r.trace.last().unwrap());
    for w in r.trace.windows(2) {
        // round(0.3 * 24) = 7 positions may change per iteration
        assert!(w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count() <= 7);
    }
    assert_eq!(r, simulated_anneal(&t.ar, &t.mlm, &t.head, 24, &s).unwrap());
}

#[test]
fn request_round_trip() {
    let t = trio(60);
    let req: InfillRequest =
        serde_json::from_str(r#"{"tokens":[104,256,108,256,111],"mask":[3,1],"sampler":{"kind":"greedy"}}"#).unwrap();
    assert_eq!(req.sampler.kind, SamplerKind::Greedy);
    let resp = serve_infill(&t.ar, &t.mlm, &t.head, &req).unwrap();
    assert_eq!((resp.ar_forwards, resp.mlm_forwards), (2, 1));
    let v: serde_json::Value = serde_json::to_value(&resp).unwrap();
    for k in ["tokens", "ar_forwards", "mlm_forwards", "wall_ms"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    let mask = req.mask_set().unwrap();
    let direct = infill_cached(&t.ar, &t.mlm, &t.head, &req.tokens, &mask, &req.sampler).unwrap();
    assert_eq!(resp.tokens, direct.tokens);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cached_equals_uncached_prop(seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let t = trio(70);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (toks, mask) = random_case(&mut rng, rate, 24);
        let g = SamplerSpec::greedy();
        let a = infill_cached(&t.ar, &t.mlm, &t.head, &toks, &mask, &g).unwrap();
        let b = infill_uncached(&t.ar, &t.mlm, &t.head, &toks, &mask, &g).unwrap();
        prop_assert_eq!(a.tokens, b.tokens);
    }
}
