use maria_core::data::corpus::{corpus_from_text, CorpusShards, Window};
use maria_core::data::synth;
use maria_core::data::tokenizer::{TokenId, VOCAB_SIZE};
use maria_core::fusion::{ar_input, FusionHead, FusionInit};
use maria_core::masking::{MaskMode, MaskRateSpec};
use maria_core::numerics::ops;
use maria_core::training::{
    aligned_holdout, cosine_lr, eval_ar_holdout, eval_fusion_holdout, eval_mlm_holdout, train_ar, train_fusion,
    train_mlm, train_model, TrainConfig, TrainLog,
};
use maria_core::transformer::{AttentionMode, ModelConfig, TransformerModel};
use maria_core::Error;

fn tiny(attention: AttentionMode, seq: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: seq,
        attention,
        ffn_mult: 2,
    }
}

fn pattern_corpus(copies: usize) -> CorpusShards {
    let pattern: Vec<TokenId> = b"the cat sat on the mat; the dog dug in the fog by the log. 0123!"
        .iter()
        .map(|&b| b as TokenId)
        .collect();
    assert_eq!(pattern.len(), 64);
    let w = Window {
        tokens: pattern,
        source: 0,
        offset: 0,
    };
    CorpusShards {
        window_len: 64,
        sources: vec!["<pattern>".into()],
        train: vec![w.clone(); copies],
        holdout: vec![w; 4],
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        micro_batch: 4,
        lr: 3e-3,
        seed: 5,
        eval_every: 0,
        holdout_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn untrained_holdout_losses_are_near_uniform() {
    let corpus = corpus_from_text(&synth::generate_text(20_000, 1), 64, 0.2, 0).unwrap();
    let ln_v = (VOCAB_SIZE as f64).ln();
    let ar = TransformerModel::new(tiny(AttentionMode::Causal, 64), 1).unwrap();
    let mlm = TransformerModel::new(tiny(AttentionMode::Bidirectional, 64), 1).unwrap();
    let a = eval_ar_holdout(&ar, &corpus.holdout).unwrap();
    let m = eval_mlm_holdout(&mlm, &corpus.holdout, &MaskRateSpec::default(), 3).unwrap();
    assert!((a - ln_v).abs() <= 0.1 * ln_v, "{a}");
    assert!((m - ln_v).abs() <= 0.1 * ln_v, "{m}");
}

#[test]
fn uniform_predictor_scores_ln_v() {
    let corpus = corpus_from_text(&synth::generate_text(5_000, 1), 32, 0.5, 0).unwrap();
    let mut m = TransformerModel::new(tiny(AttentionMode::Causal, 64), 1).unwrap();
    m.head.data_mut().fill(0.0);
    let l = eval_ar_holdout(&m, &corpus.holdout).unwrap();
    assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 1e-6);
    assert_eq!(l, eval_ar_holdout(&m, &corpus.holdout).unwrap());
}

#[test]
fn ar_memorises_a_repeated_pattern() {
    let corpus = pattern_corpus(64);
    let (model, log) = train_ar(tiny(AttentionMode::Causal, 64), &corpus, &quick(300)).unwrap();
    let fin = log.final_holdout().unwrap();
    assert!(fin < 0.1, "holdout {fin}");
    assert!(fin < log.initial_holdout().unwrap());
    assert!(log.records.last().unwrap().lr <= 1e-7);
    assert_eq!(eval_ar_holdout(&model, &corpus.holdout).unwrap(), fin);
}

#[test]
fn lr_trace_follows_cosine_exactly() {
    let corpus = pattern_corpus(16);
    let cfg = quick(6);
    let (_, log) = train_ar(tiny(AttentionMode::Causal, 64), &corpus, &cfg).unwrap();
    let expected: Vec<f64> = (1..=6).map(|t| cosine_lr(cfg.lr, t, 6)).collect();
    assert_eq!(log.lr_trace(), expected);
    assert!(log.records.windows(2).all(|w| w[0].step + 1 == w[1].step));
}

#[test]
fn same_seed_same_log() {
    let corpus = corpus_from_text(&synth::generate_text(30_000, 2), 32, 0.1, 0).unwrap();
    let cfg = TrainConfig {
        eval_every: 2,
        ..quick(4)
    };
    let (m1, l1) = train_mlm(tiny(AttentionMode::Bidirectional, 32), &corpus, &cfg).unwrap();
    let (m2, l2) = train_mlm(tiny(AttentionMode::Bidirectional, 32), &corpus, &cfg).unwrap();
    assert!(l1.same_trajectory(&l2));
    assert_eq!(m1.checksum(), m2.checksum());
}

#[test]
fn micro_batching_matches_full_batch() {
    let corpus = corpus_from_text(&synth::generate_text(40_000, 3), 16, 0.0, 0).unwrap();
    let run = |micro: usize, mode: AttentionMode| {
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 32,
            micro_batch: micro,
            lr: 1e-3,
            seed: 11,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut m = TransformerModel::new(tiny(mode, 16), 4).unwrap();
        train_model(&mut m, &corpus, &cfg).unwrap();
        m
    };
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let reference = run(32, mode);
        for micro in [1, 8] {
            let other = run(micro, mode);
            let dev = reference
                .params()
                .iter()
                .zip(other.params())
                .map(|(a, b)| a.max_abs_diff(b))
                .fold(0.0f32, f32::max);
            assert!(dev <= 1e-5, "{mode:?} micro {micro}: {dev}");
        }
    }
}

#[test]
fn rate_zero_batches_are_skipped() {
    let corpus = corpus_from_text(&synth::generate_text(20_000, 4), 32, 0.0, 0).unwrap();
    let cfg = TrainConfig {
        mask_rate: MaskRateSpec::fixed(0.0),
        mask_mode: MaskMode::Exact,
        ..quick(3)
    };
    let mut m = TransformerModel::new(tiny(AttentionMode::Bidirectional, 32), 4).unwrap();
    let before = m.checksum();
    let log = train_model(&mut m, &corpus, &cfg).unwrap();
    assert_eq!(m.checksum(), before);
    assert!(log.records.iter().skip(1).all(|r| r.loss == Some(0.0)));
}

#[test]
fn too_small_corpus_is_data_error() {
    let corpus = corpus_from_text(&"x".repeat(100), 32, 0.0, 0).unwrap();
    let r = train_ar(tiny(AttentionMode::Causal, 32), &corpus, &quick(1));
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn frozen_model_cannot_be_trained() {
    let corpus = pattern_corpus(16);
    let mut m = TransformerModel::new(tiny(AttentionMode::Causal, 64), 1).unwrap();
    m.freeze();
    assert!(train_model(&mut m, &corpus, &quick(1)).is_err());
}

#[test]
fn log_jsonl_round_trip() {
    let corpus = pattern_corpus(16);
    let (_, log) = train_ar(tiny(AttentionMode::Causal, 64), &corpus, &quick(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    log.write_jsonl(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.lines().next().unwrap().starts_with(r#"{"step":0,"lr":"#));
    assert_eq!(TrainLog::read_jsonl(&p).unwrap(), log);
}

struct Bases {
    ar: TransformerModel,
    mlm: TransformerModel,
    corpus: CorpusShards,
}

fn trained_bases() -> Bases {
    let corpus = corpus_from_text(&synth::generate_text(1_000_000, 6), 32, 0.01, 0).unwrap();
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 8,
        micro_batch: 8,
        lr: 3e-3,
        seed: 1,
        eval_every: 0,
        holdout_size: 32,
        ..TrainConfig::default()
    };
    let (mut ar, _) = train_ar(tiny(AttentionMode::Causal, 32), &corpus, &cfg).unwrap();
    let (mut mlm, _) = train_mlm(tiny(AttentionMode::Bidirectional, 32), &corpus, &cfg).unwrap();
    ar.freeze();
    mlm.freeze();
    Bases { ar, mlm, corpus }
}

#[test]
fn fusion_training_properties() {
    let b = trained_bases();
    let (ar_sum, mlm_sum) = (b.ar.checksum(), b.mlm.checksum());
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        micro_batch: 4,
        lr: 1e-3,
        seed: 2,
        eval_every: 50,
        holdout_size: 32,
        ..TrainConfig::default()
    };
    let (head_p, log_p) = train_fusion(&b.ar, &b.mlm, &b.corpus, &cfg, FusionInit::Product).unwrap();
    let (_, log_r) = train_fusion(&b.ar, &b.mlm, &b.corpus, &cfg, FusionInit::Random).unwrap();
    assert_eq!((b.ar.checksum(), b.mlm.checksum()), (ar_sum, mlm_sum));
    assert!(log_p.initial_holdout().unwrap() < log_r.initial_holdout().unwrap());
    assert!(log_p.final_holdout().unwrap() < log_p.initial_holdout().unwrap());
    assert_eq!(head_p.train_steps, 200);
    assert_eq!(head_p.init_kind(), FusionInit::Product);

    let aligned = aligned_holdout(&b.ar, &b.mlm, &b.corpus.holdout[..8], &MaskRateSpec::fixed(0.5), 9).unwrap();
    let again = aligned_holdout(&b.ar, &b.mlm, &b.corpus.holdout[..8], &MaskRateSpec::fixed(0.5), 9).unwrap();
    assert_eq!(eval_fusion_holdout(&head_p, &aligned).unwrap(), eval_fusion_holdout(&head_p, &again).unwrap());
}

#[test]
fn product_init_loss_equals_logit_average_ensemble() {
    let b = trained_bases();
    let head = FusionHead::init_product(&b.ar, &b.mlm).unwrap();
    let windows = &b.corpus.holdout[..6];
    let spec = MaskRateSpec::fixed(0.4);
    let aligned = aligned_holdout(&b.ar, &b.mlm, windows, &spec, 4).unwrap();
    let fused = eval_fusion_holdout(&head, &aligned).unwrap();
    // independent oracle: average the two models' full logits
    let masks = maria_core::training::holdout_masks(windows, &spec, 4).unwrap();
    let (mut nll, mut n) = (0.0, 0.0);
    for (w, m) in windows.iter().zip(&masks) {
        let la = b.ar.forward_logits(&ar_input(&w.tokens)).unwrap();
        let masked = maria_core::masking::apply_mask(&w.tokens, m).unwrap();
        let lm = b.mlm.forward_logits(&masked.tokens).unwrap();
        for &i in m.indices() {
            let avg: Vec<f32> = la.row(i).iter().zip(lm.row(i)).map(|(x, y)| (x + y) / 2.0).collect();
            nll += ops::nll(&avg, w.tokens[i] as usize);
            n += 1.0;
        }
    }
    assert!((fused - nll / n).abs() <= 1e-5, "{fused} vs {}", nll / n);
}
