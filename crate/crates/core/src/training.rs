//! Training loops for the causal model, the bidirectional model and the
//! fusion head, plus holdout evaluation.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{CorpusShards, Window};
use crate::data::tokenizer::TokenId;
use crate::error::{Error, Result};
use crate::fusion::{align_hidden, ar_input, maria_loss_many, AlignedBatch, FusionHead, FusionInit};
use crate::masking::{apply_mask, sample_mask, sample_mask_rate, MaskMode, MaskRateSpec, MaskSet};
use crate::numerics::{ops, AdamState, Graph};
use crate::transformer::{ModelConfig, TransformerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// sequences per optimizer step
    pub batch_size: usize,
    /// sequences per forward/backward graph; gradients accumulate across them
    pub micro_batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mask_rate: MaskRateSpec,
    pub mask_mode: MaskMode,
    /// holdout evaluation period in steps; 0 evaluates only at the start and end
    pub eval_every: usize,
    pub holdout_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            micro_batch: 8,
            lr: 5e-5,
            seed: 0,
            mask_rate: MaskRateSpec::default(),
            mask_mode: MaskMode::Bernoulli,
            eval_every: 100,
            holdout_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.micro_batch == 0 || self.batch_size % self.micro_batch != 0 {
            return Err(Error::config(
                "micro_batch",
                format!("must divide batch_size ({}), got {}", self.batch_size, self.micro_batch),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        self.mask_rate.validate()
    }
}

/// `lr · (1 + cos(π t / steps)) / 2` for step `t ∈ [0, steps]`; the update
/// made at step `t` (1-based) uses `cosine_lr(lr, t, steps)`, so the last
/// update uses exactly 0.
pub fn cosine_lr(lr: f64, t: usize, steps: usize) -> f64 {
    lr * (1.0 + (PI * t as f64 / steps as f64).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// training loss of the batch used at this step; absent for step 0
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<f64>,
    #[serde(default)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn holdout_curve(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.holdout.map(|h| (r.step, h))).collect()
    }

    pub fn initial_holdout(&self) -> Option<f64> {
        self.holdout_curve().first().map(|p| p.1)
    }

    pub fn final_holdout(&self) -> Option<f64> {
        self.holdout_curve().last().map(|p| p.1)
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.step > 0).map(|r| r.lr).collect()
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.step == b.step && a.loss == b.loss && a.lr == b.lr && a.holdout == b.holdout)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

fn holdout_slice<'a>(corpus: &'a CorpusShards, cfg: &TrainConfig) -> &'a [Window] {
    let n = corpus.holdout.len().min(cfg.holdout_size);
    if n == 0 {
        log::warn!("corpus has no holdout windows; holdout loss is not tracked");
    }
    &corpus.holdout[..n]
}

fn check_corpus(corpus: &CorpusShards, cfg: &TrainConfig, max_seq_len: usize) -> Result<()> {
    if corpus.window_len > max_seq_len {
        return Err(Error::contract(format!(
            "corpus windows of {} tokens exceed max_seq_len {max_seq_len}",
            corpus.window_len
        )));
    }
    let have = corpus.train.len() * corpus.window_len;
    let need = corpus.window_len * cfg.batch_size;
    if corpus.train.is_empty() || have < need {
        return Err(Error::Data(format!(
            "training split has {have} tokens, need at least {need} (one batch of windows)"
        )));
    }
    Ok(())
}

/// Masks for evaluation: one exact-count mask per window, drawn from `spec`
/// with a generator seeded by `seed`.
pub fn holdout_masks(windows: &[Window], spec: &MaskRateSpec, seed: u64) -> Result<Vec<MaskSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows
        .iter()
        .map(|w| {
            let rate = sample_mask_rate(spec, &mut rng)?;
            Ok(sample_mask(w.tokens.len(), rate, MaskMode::Exact, &mut rng))
        })
        .collect()
}

/// Mean next-token NLL over every position (inputs are BOS-shifted).
pub fn eval_ar_holdout(model: &TransformerModel, windows: &[Window]) -> Result<f64> {
    let (mut nll, mut count) = (0.0, 0.0);
    for w in windows {
        let logits = model.forward_logits(&ar_input(&w.tokens))?;
        let targets: Vec<usize> = w.tokens.iter().map(|&t| t as usize).collect();
        let ce = ops::cross_entropy(&logits, &targets, &vec![1.0; targets.len()])?;
        nll += ce.loss * ce.weight;
        count += ce.weight;
    }
    Ok(if count > 0.0 { nll / count } else { 0.0 })
}

/// Mean masked-token NLL of a bidirectional model.
pub fn eval_mlm_holdout(model: &TransformerModel, windows: &[Window], spec: &MaskRateSpec, seed: u64) -> Result<f64> {
    let masks = holdout_masks(windows, spec, seed)?;
    let (mut nll, mut count) = (0.0, 0.0);
    for (w, m) in windows.iter().zip(&masks) {
        let masked = apply_mask(&w.tokens, m)?;
        let logits = model.forward_logits(&masked.tokens)?;
        let targets: Vec<usize> = w.tokens.iter().map(|&t| t as usize).collect();
        let ce = ops::cross_entropy(&logits, &targets, &m.weights())?;
        nll += ce.loss * ce.weight;
        count += ce.weight;
    }
    Ok(if count > 0.0 { nll / count } else { 0.0 })
}

pub fn aligned_holdout(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    windows: &[Window],
    spec: &MaskRateSpec,
    seed: u64,
) -> Result<Vec<AlignedBatch>> {
    let masks = holdout_masks(windows, spec, seed)?;
    windows
        .iter()
        .zip(&masks)
        .map(|(w, m)| align_hidden(&w.tokens, &apply_mask(&w.tokens, m)?, ar, mlm))
        .collect()
}

/// Mean masked NLL of the fused head over precomputed aligned holdout states.
pub fn eval_fusion_holdout(head: &FusionHead, aligned: &[AlignedBatch]) -> Result<f64> {
    Ok(maria_loss_many(head, aligned)?.loss)
}

/// Fixed seed offset so holdout masks never coincide with training masks.
const EVAL_SEED_SALT: u64 = 0x0e7a_1d00;

/// Sequences and loss weights for one step, drawn before any micro-batch split
/// so the data does not depend on `micro_batch`.
struct LmBatch {
    inputs: Vec<Vec<TokenId>>,
    targets: Vec<Vec<usize>>,
    weights: Vec<Vec<f32>>,
}

fn draw_lm_batch(model: &TransformerModel, corpus: &CorpusShards, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LmBatch> {
    let mut b = LmBatch {
        inputs: Vec::with_capacity(cfg.batch_size),
        targets: Vec::with_capacity(cfg.batch_size),
        weights: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let w = &corpus.train[rng.random_range(0..corpus.train.len())].tokens;
        let targets = w.iter().map(|&t| t as usize).collect();
        if model.is_causal() {
            b.inputs.push(ar_input(w));
            b.weights.push(vec![1.0; w.len()]);
        } else {
            let rate = sample_mask_rate(&cfg.mask_rate, rng)?;
            let m = sample_mask(w.len(), rate, cfg.mask_mode, rng);
            b.inputs.push(apply_mask(w, &m)?.tokens);
            b.weights.push(m.weights());
        }
        b.targets.push(targets);
    }
    Ok(b)
}

/// Accumulates gradients of `Σ w·nll / total` for the given sequences.
fn lm_accumulate(
    model: &mut TransformerModel,
    inputs: &[Vec<TokenId>],
    targets: &[Vec<usize>],
    weights: &[Vec<f32>],
    total: f32,
) -> Result<f64> {
    let seg = inputs[0].len();
    let ids: Vec<TokenId> = inputs.concat();
    let tg: Vec<usize> = targets.concat();
    let w: Vec<f32> = weights.concat().into_iter().map(|x| x / total).collect();
    let (value, grads) = {
        let mut g = Graph::new();
        let (logits, fwd) = model.logits_graph(&mut g, &ids, seg)?;
        let loss = g.cross_entropy_sum(logits, &tg, &w)?;
        let grads = g.backward(loss)?;
        let per_param: Vec<Option<Vec<f32>>> = fwd.params.iter().map(|v| grads.get(*v).map(<[f32]>::to_vec)).collect();
        (g.scalar(loss) as f64, per_param)
    };
    model.accumulate(&grads)?;
    Ok(value)
}

/// Trains `model` in place with its own objective: next-token prediction for
/// a causal model, masked-token prediction for a bidirectional one.
pub fn train_model(model: &mut TransformerModel, corpus: &CorpusShards, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    check_corpus(corpus, cfg, model.max_seq_len())?;
    if model.is_frozen() {
        return Err(Error::contract("cannot train a frozen model"));
    }
    let holdout = holdout_slice(corpus, cfg);
    let eval_seed = cfg.seed ^ EVAL_SEED_SALT;
    let eval = |m: &TransformerModel| -> Result<Option<f64>> {
        if holdout.is_empty() {
            return Ok(None);
        }
        Ok(Some(if m.is_causal() {
            eval_ar_holdout(m, holdout)?
        } else {
            eval_mlm_holdout(m, holdout, &cfg.mask_rate, eval_seed)?
        }))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut log = TrainLog::default();
    log.records.push(LogRecord {
        step: 0,
        loss: None,
        lr: cosine_lr(cfg.lr, 0, cfg.steps),
        holdout: eval(model)?,
        wall_ms: 0.0,
    });
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let batch = draw_lm_batch(model, corpus, cfg, &mut rng)?;
        let total: f32 = batch.weights.iter().flatten().sum();
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let mut loss = 0.0;
        if total > 0.0 {
            for c in (0..cfg.batch_size).step_by(cfg.micro_batch) {
                let r = c..c + cfg.micro_batch;
                loss += lm_accumulate(model, &batch.inputs[r.clone()], &batch.targets[r.clone()], &batch.weights[r], total)?;
            }
            adam.step(&mut model.params_mut(), lr as f32)?;
            for p in model.params_mut() {
                p.clear_grad();
            }
        } else {
            log::warn!("step {step}: batch has no masked positions, update skipped");
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let holdout = if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            eval(model)?
        } else {
            None
        };
        if let Some(h) = holdout {
            log::info!("step {step}/{}: loss {loss:.4} holdout {h:.4} lr {lr:.3e}", cfg.steps);
        }
        log.records.push(LogRecord {
            step,
            loss: Some(loss),
            lr,
            holdout,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Fresh causal model trained with [`train_model`]; `cfg.seed` seeds the init.
pub fn train_ar(model_config: ModelConfig, corpus: &CorpusShards, cfg: &TrainConfig) -> Result<(TransformerModel, TrainLog)> {
    if !model_config.is_causal() {
        return Err(Error::config("attention", "train_ar needs a causal model"));
    }
    let mut model = TransformerModel::new(model_config, cfg.seed)?;
    let log = train_model(&mut model, corpus, cfg)?;
    Ok((model, log))
}

pub fn train_mlm(model_config: ModelConfig, corpus: &CorpusShards, cfg: &TrainConfig) -> Result<(TransformerModel, TrainLog)> {
    if model_config.is_causal() {
        return Err(Error::config("attention", "train_mlm needs a bidirectional model"));
    }
    let mut model = TransformerModel::new(model_config, cfg.seed)?;
    let log = train_model(&mut model, corpus, cfg)?;
    Ok((model, log))
}

/// Trains only `W3` over frozen base models. The base models are borrowed
/// immutably and their weights cannot change.
pub fn train_fusion(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    corpus: &CorpusShards,
    cfg: &TrainConfig,
    init: FusionInit,
) -> Result<(FusionHead, TrainLog)> {
    let head = FusionHead::new(init, ar, mlm, cfg.seed)?;
    train_head(head, ar, mlm, corpus, cfg)
}

/// [`train_fusion`] starting from an existing head.
pub fn train_head(
    mut head: FusionHead,
    ar: &TransformerModel,
    mlm: &TransformerModel,
    corpus: &CorpusShards,
    cfg: &TrainConfig,
) -> Result<(FusionHead, TrainLog)> {
    cfg.validate()?;
    head.check_compatible(ar, mlm)?;
    check_corpus(corpus, cfg, ar.max_seq_len().min(mlm.max_seq_len()))?;
    let holdout = holdout_slice(corpus, cfg);
    let aligned_eval = aligned_holdout(ar, mlm, holdout, &cfg.mask_rate, cfg.seed ^ EVAL_SEED_SALT)?;
    let eval = |h: &FusionHead| -> Result<Option<f64>> {
        if aligned_eval.is_empty() {
            Ok(None)
        } else {
            eval_fusion_holdout(h, &aligned_eval).map(Some)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut log = TrainLog::default();
    log.records.push(LogRecord {
        step: 0,
        loss: None,
        lr: cosine_lr(cfg.lr, 0, cfg.steps),
        holdout: eval(&head)?,
        wall_ms: 0.0,
    });
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let w = &corpus.train[rng.random_range(0..corpus.train.len())].tokens;
            let rate = sample_mask_rate(&cfg.mask_rate, &mut rng)?;
            let m = sample_mask(w.len(), rate, cfg.mask_mode, &mut rng);
            batch.push(align_hidden(w, &apply_mask(w, &m)?, ar, mlm)?);
        }
        let total: f32 = batch.iter().flat_map(|b| b.loss_mask.iter()).sum();
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let mut loss = 0.0;
        if total > 0.0 {
            for chunk in batch.chunks(cfg.micro_batch) {
                loss += head.accumulate_scaled(chunk, total)?;
            }
            adam.step(&mut head.params_mut(), lr as f32)?;
            for p in head.params_mut() {
                p.clear_grad();
            }
        } else {
            log::warn!("step {step}: batch has no masked positions, update skipped");
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("fusion training loss"));
        }
        head.train_steps += 1;
        let holdout = if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            eval(&head)?
        } else {
            None
        };
        if let Some(h) = holdout {
            log::info!("fusion step {step}/{}: loss {loss:.4} holdout {h:.4}", cfg.steps);
        }
        log.records.push(LogRecord {
            step,
            loss: Some(loss),
            lr,
            holdout,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((head, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() <= 1e-7);
    }

    #[test]
    fn micro_batch_must_divide() {
        let cfg = TrainConfig {
            batch_size: 32,
            micro_batch: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "micro_batch"));
    }

    #[test]
    fn config_toml_like_json_round_trip() {
        let cfg = TrainConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.batch_size, 32);
    }
}
