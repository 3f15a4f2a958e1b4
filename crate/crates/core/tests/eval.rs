use std::sync::OnceLock;

use maria_core::data::corpus::{corpus_from_text, Window};
use maria_core::data::synth;
use maria_core::data::tokenizer::{ByteTokenizer, TokenId, VOCAB_SIZE};
use maria_core::eval::*;
use maria_core::fusion::{ar_input, FusionHead, FusionInit};
use maria_core::inference::{generate_unconditional, SamplerSpec};
use maria_core::masking::{apply_mask, MaskSet};
use maria_core::numerics::ops;
use maria_core::training::{train_ar, TrainConfig};
use maria_core::transformer::{AttentionMode, ModelConfig, TransformerModel};
use maria_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(attention: AttentionMode, seq: usize) -> ModelConfig {
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

fn windows(n: usize, len: usize, seed: u64) -> Vec<Window> {
    let text = synth::generate_text(n * len + 100, seed);
    corpus_from_text(&text, len, 0.0, 0).unwrap().train.into_iter().take(n).collect()
}

fn models(seed: u64) -> (TransformerModel, TransformerModel) {
    (
        TransformerModel::with_init_std(cfg(AttentionMode::Causal, 64), seed, 0.1).unwrap(),
        TransformerModel::with_init_std(cfg(AttentionMode::Bidirectional, 64), seed + 1, 0.1).unwrap(),
    )
}

#[test]
fn product_head_ppl_matches_logit_average_ensemble() {
    let (ar, mlm) = models(1);
    let head = FusionHead::init_product(&ar, &mlm).unwrap();
    let ws = windows(12, 48, 1);
    for rate in DEFAULT_RATES {
        let got = masked_ppl_maria(&ar, &mlm, &head, &ws, rate, 7).unwrap();
        let masks = rate_masks(&ws, rate, 7).unwrap();
        let (mut nll, mut n) = (0.0, 0usize);
        for (w, m) in ws.iter().zip(&masks) {
            let la = ar.forward_logits(&ar_input(&w.tokens)).unwrap();
            let lm = mlm.forward_logits(&apply_mask(&w.tokens, m).unwrap().tokens).unwrap();
            for &i in m.indices() {
                let avg: Vec<f32> = la.row(i).iter().zip(lm.row(i)).map(|(a, b)| 0.5 * (a + b)).collect();
                nll += ops::nll(&avg, w.tokens[i] as usize);
                n += 1;
            }
        }
        let oracle = (nll / n as f64).exp();
        assert_eq!(got.tokens, n);
        assert!((got.ppl - oracle).abs() / oracle <= 1e-4, "rate {rate}: {} vs {oracle}", got.ppl);
    }
}

#[test]
fn uniform_models_score_vocab_size() {
    let (mut ar, mut mlm) = models(2);
    ar.head.data_mut().fill(0.0);
    mlm.head.data_mut().fill(0.0);
    let mut head = FusionHead::init_product(&ar, &mlm).unwrap();
    head.w3.data_mut().fill(0.0);
    let ws = windows(4, 32, 2);
    let v = VOCAB_SIZE as f64;
    for e in [
        masked_ppl_ar(&ar, &ws, 0.5, 0).unwrap(),
        masked_ppl_mlm_ardecode(&mlm, &ws, 0.5, 0).unwrap(),
        masked_ppl_maria(&ar, &mlm, &head, &ws, 0.5, 0).unwrap(),
    ] {
        assert!((e.ppl - v).abs() < 1e-6 * v, "{}: {}", e.method, e.ppl);
    }
}

#[test]
fn ar_at_full_rate_is_plain_ppl() {
    let (ar, _) = models(3);
    let ws = windows(6, 40, 3);
    let e = masked_ppl_ar(&ar, &ws, 1.0, 0).unwrap();
    let (mut nll, mut n) = (0.0, 0);
    for w in &ws {
        let (s, c) = sequence_nll(&ar, &w.tokens).unwrap();
        nll += s;
        n += c;
    }
    assert_eq!(e.tokens, n);
    assert!((e.nll_sum - nll).abs() < 1e-9 * nll);
}

#[test]
fn mlm_decode_single_token_and_counts() {
    let (_, mlm) = models(4);
    let ws = windows(1, 30, 4);
    let m = MaskSet::new(vec![11], 30).unwrap();
    let e = masked_ppl_mlm_ardecode_with(&mlm, &ws, &[m.clone()], 0.0).unwrap();
    let logits = mlm.forward_logits(&apply_mask(&ws[0].tokens, &m).unwrap().tokens).unwrap();
    let oracle = ops::nll(logits.row(11), ws[0].tokens[11] as usize);
    assert!((e.nll_sum - oracle).abs() < 1e-9);

    let ws = windows(5, 30, 5);
    let e = masked_ppl_mlm_ardecode(&mlm, &ws, 0.5, 1).unwrap();
    assert_eq!(e.forwards, 5 * 15);
    assert_eq!(e.tokens, 5 * 15);
}

#[test]
fn tiny_rates_are_flagged() {
    let (ar, _) = models(5);
    let ws = windows(10, 32, 6);
    assert!(masked_ppl_ar(&ar, &ws, 0.1, 0).unwrap().insufficient);
    assert!(!masked_ppl_ar(&ar, &ws, 0.9, 0).unwrap().insufficient);
    let none = masked_ppl_ar(&ar, &ws, 0.0, 0).unwrap();
    assert_eq!(none.tokens, 0);
    assert!(none.insufficient);
}

#[test]
fn reports_are_deterministic() {
    let (ar, mlm) = models(6);
    let head = FusionHead::new(FusionInit::Random, &ar, &mlm, 3).unwrap();
    let ws = windows(4, 32, 7);
    let a = masked_ppl_maria(&ar, &mlm, &head, &ws, 0.3, 9).unwrap();
    assert_eq!(a, masked_ppl_maria(&ar, &mlm, &head, &ws, 0.3, 9).unwrap());
    let mut rep = PerplexityReport::new("m", "synth", 9);
    rep.entries.push(a);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    write_json(&p, &rep).unwrap();
    assert_eq!(read_json::<PerplexityReport>(&p).unwrap(), rep);
    let csv = rep.to_csv_string().unwrap();
    assert!(csv.starts_with("model,dataset,method,rate,ppl"));
    assert_eq!(csv.lines().count(), 2);

    let mut v: serde_json::Value = serde_json::to_value(&rep).unwrap();
    v["version"] = 99.into();
    std::fs::write(&p, v.to_string()).unwrap();
    assert!(matches!(read_json::<PerplexityReport>(&p), Err(Error::Version { found: 99, .. })));
}

fn trained_ar() -> &'static TransformerModel {
    static MODEL: OnceLock<TransformerModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = corpus_from_text(&synth::generate_text(400_000, 11), 64, 0.0, 0).unwrap();
        let tc = TrainConfig {
            steps: 600,
            batch_size: 8,
            micro_batch: 8,
            lr: 1e-2,
            seed: 3,
            eval_every: 0,
            ..TrainConfig::default()
        };
        train_ar(cfg(AttentionMode::Causal, 64), &corpus, &tc).unwrap().0
    })
}

#[test]
fn rolling_ppl_properties() {
    let ar = trained_ar();
    let tok = ByteTokenizer;
    let short = tok.encode(&synth::generate_text(40, 1)[..40]);
    let e = rolling_ppl(ar, &short, 64).unwrap();
    let (nll, n) = sequence_nll(ar, &short).unwrap();
    assert!((e.ppl - (nll / n as f64).exp()).abs() < 1e-12);

    let a = tok.encode(&synth::generate_text(300, 2)[..256]);
    let b = tok.encode(&synth::generate_text(300, 3)[..192]);
    let joined: Vec<TokenId> = a.iter().chain(&b).copied().collect();
    let (ea, eb, ej) = (
        rolling_ppl(ar, &a, 64).unwrap(),
        rolling_ppl(ar, &b, 64).unwrap(),
        rolling_ppl(ar, &joined, 64).unwrap(),
    );
    assert!((ej.nll_sum - ea.nll_sum - eb.nll_sum).abs() < 1e-9 * ej.nll_sum);
    assert_eq!(ej.tokens, ea.tokens + eb.tokens);

    let (mut full, mut half) = (0.0, 0.0);
    for seed in 0..10 {
        let s = tok.encode(&synth::generate_text(600, 100 + seed)[..512]);
        full += rolling_ppl(ar, &s, 64).unwrap().ppl;
        half += rolling_ppl(ar, &s, 32).unwrap().ppl;
    }
    assert!(half >= full, "half-window {half} < full-window {full}");
    assert!(rolling_ppl(ar, &a, 65).is_err());
}

#[test]
fn generative_ppl_orders_greedy_below_noise() {
    let ar = trained_ar();
    let own: Vec<Vec<TokenId>> = (0..3)
        .map(|_| generate_unconditional(ar, 48, &SamplerSpec::greedy()).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<Vec<TokenId>> = (0..3).map(|_| (0..48).map(|_| rng.random_range(0..256)).collect()).collect();
    let g = generative_ppl(ar, &own).unwrap();
    assert!(g < generative_ppl(ar, &noise).unwrap());
    assert_eq!(g, generative_ppl(ar, &own).unwrap());
    assert!(generative_ppl(ar, &[]).is_err());
}

fn planted_games(ratings: &[(&str, f64)], games: usize, seed: u64) -> Vec<ComparisonRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..games)
        .map(|k| {
            let i = rng.random_range(0..ratings.len());
            let j = (i + rng.random_range(1..ratings.len())) % ratings.len();
            let p = 1.0 / (1.0 + 10f64.powf((ratings[j].1 - ratings[i].1) / 400.0));
            ComparisonRecord {
                item: format!("item{k}"),
                a: ratings[i].0.into(),
                b: ratings[j].0.into(),
                outcome: if rng.random_bool(p) { Outcome::A } else { Outcome::B },
            }
        })
        .collect()
}

#[test]
fn bradley_terry_recovers_planted_ratings() {
    let planted = [("m0", 1000.0), ("m1", 1100.0), ("m2", 1200.0)];
    let recs = planted_games(&planted, 2000, 1);
    let t = bradley_terry(&recs, &EloConfig::default()).unwrap();
    // the fit is anchored at mean 1000 and the planted mean is 1100
    for (name, r) in planted {
        let got = t.ratings[name] + 100.0;
        assert!((got - r).abs() <= 30.0, "{name}: {got} vs {r}");
    }
    assert!(t.connected && t.converged);
    let mean = t.ratings.values().sum::<f64>() / 3.0;
    assert!((mean - 1000.0).abs() < 1e-9);

    let mut shuffled = recs.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let s = bradley_terry(&shuffled, &EloConfig::default()).unwrap();
    for (k, v) in &t.ratings {
        assert!((v - s.ratings[k]).abs() <= 1e-9);
    }
}

#[test]
fn bradley_terry_two_player_closed_form() {
    // unregularized MLE for one pair: r_a - r_b = 400 log10(k / (n - k))
    let mut recs = Vec::new();
    for k in 0..30 {
        let outcome = if k < 21 { Outcome::A } else { Outcome::B };
        recs.push(ComparisonRecord {
            item: k.to_string(),
            a: "x".into(),
            b: "y".into(),
            outcome,
        });
    }
    let cfg = EloConfig {
        l2: 1e-9,
        ..EloConfig::default()
    };
    let t = bradley_terry(&recs, &cfg).unwrap();
    let expected = 400.0 * (21.0f64 / 9.0).log10();
    assert!((t.ratings["x"] - t.ratings["y"] - expected).abs() < 1e-4);
    assert!((cfg.win_probability(t.ratings["x"], t.ratings["y"]) - 0.7).abs() < 1e-6);
}

#[test]
fn bradley_terry_symmetry_ties_and_components() {
    let rec = |a: &str, b: &str, o| ComparisonRecord {
        item: "i".into(),
        a: a.into(),
        b: b.into(),
        outcome: o,
    };
    let sym = vec![rec("a", "b", Outcome::A), rec("a", "b", Outcome::B)];
    let t = bradley_terry(&sym, &EloConfig::default()).unwrap();
    assert!((t.ratings["a"] - 1000.0).abs() < 1e-9 && (t.ratings["b"] - 1000.0).abs() < 1e-9);
    let ties = vec![rec("a", "b", Outcome::Tie); 5];
    let t = bradley_terry(&ties, &EloConfig::default()).unwrap();
    assert!((t.ratings["a"] - t.ratings["b"]).abs() < 1e-9);

    let split = vec![rec("a", "b", Outcome::A), rec("c", "d", Outcome::A)];
    let t = bradley_terry(&split, &EloConfig::default()).unwrap();
    assert!(!t.connected);
    assert_eq!(t.components.len(), 2);
    assert!(t.to_csv_string().unwrap().starts_with("model,rating,component"));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.jsonl");
    write_records(&p, &split).unwrap();
    assert_eq!(read_records(&p).unwrap(), split);
}

#[test]
fn probe_controls() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 4;
    let labels: Vec<usize> = (0..2000).map(|_| rng.random_range(0..c)).collect();
    let onehot: Vec<Vec<f32>> = labels
        .iter()
        .map(|&l| (0..c).map(|k| f32::from(u8::from(k == l))).collect())
        .collect();
    let cfg = ProbeConfig::default();
    let r = train_linear_probe(&onehot[..1600], &labels[..1600], &onehot[1600..], &labels[1600..], &cfg).unwrap();
    assert_eq!(r.accuracy, 1.0);

    let noise: Vec<Vec<f32>> = (0..2000).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let r = train_linear_probe(&noise[..1600], &labels[..1600], &noise[1600..], &labels[1600..], &cfg).unwrap();
    assert!((r.accuracy - 0.25).abs() <= 3.0 * (0.25f64 * 0.75 / 400.0).sqrt(), "{}", r.accuracy);
    assert!((r.stderr - (r.accuracy * (1.0 - r.accuracy) / 400.0).sqrt()).abs() < 1e-12);
}

#[test]
fn probe_on_models_runs_each_source() {
    let (ar, mlm) = models(8);
    let data = synth::tagged_sequences(10, 24, 1);
    for src in [ProbeSource::MlmOnly, ProbeSource::ArOnly, ProbeSource::Concat] {
        let r = probe_tagging(
            src,
            &ar,
            &mlm,
            &data,
            &ProbeConfig {
                epochs: 1,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.source, Some(src));
        assert_eq!(r.n_test, 2 * 24);
    }
    let feats = probe_features(ProbeSource::Concat, &ar, &mlm, &data[0].0).unwrap();
    assert_eq!(feats[0].len(), 64);
    let single: Vec<_> = data.iter().map(|(t, l)| (t.clone(), vec![0; l.len()])).collect();
    assert!(probe_tagging(ProbeSource::MlmOnly, &ar, &mlm, &single, &ProbeConfig::default()).is_err());
}

#[test]
fn bench_report_shape_and_zero_mask() {
    let mk = |a| ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 8,
        n_layers: 1,
        n_heads: 1,
        max_seq_len: 64,
        attention: a,
        ffn_mult: 1,
    };
    let ar = TransformerModel::new(mk(AttentionMode::Causal), 1).unwrap();
    let mlm = TransformerModel::new(mk(AttentionMode::Bidirectional), 2).unwrap();
    let head = FusionHead::init_product(&ar, &mlm).unwrap();
    let cfg = BenchConfig {
        lengths: vec![16, 32, 64],
        runs: 3,
        warmups: 1,
        ..Default::default()
    };
    let r = throughput_bench(&ar, &mlm, &head, &BenchMethod::ALL, &cfg).unwrap();
    assert_eq!(r.methods.len(), 3);
    for m in &r.methods {
        assert!(m.fit.is_some());
        assert!(m.timings.iter().all(|t| t.wall_ms.len() == 3 && t.masked == t.length / 2));
    }
    let csv = r.to_csv_string().unwrap();
    assert!(csv.lines().next().unwrap().ends_with("slope,r2"));
    assert_eq!(csv.lines().count(), 1 + 9);

    let zero = BenchConfig {
        mask_rate: 0.0,
        ..cfg
    };
    let z = throughput_bench(&ar, &mlm, &head, &BenchMethod::ALL, &zero).unwrap();
    for m in &z.methods {
        assert!(m.timings.iter().all(|t| t.mean_ms < 0.5 && t.masked == 0), "{:?}", m.timings);
    }
}
