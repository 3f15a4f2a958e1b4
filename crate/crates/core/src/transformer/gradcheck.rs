//! Whole-model finite-difference check of the graph's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::tokenizer::{TokenId, BYTE_VOCAB};
use crate::error::Result;
use crate::numerics::{ops, Graph};
use crate::transformer::{ModelConfig, TransformerModel};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub sampled: usize,
    pub passed: usize,
    pub tolerance: f64,
    pub worst_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.sampled.max(1) as f64
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Samples `samples` parameter entries uniformly over all tensors and compares
/// the backward-pass gradient of a masked cross-entropy loss against a central
/// difference with step `eps`. An entry passes when its relative error is at
/// most `tolerance`, or when both sides are below `1e-5` in absolute value
/// difference (entries whose gradient is numerically zero).
///
/// Weights are re-initialised with `init_std` so that gradients sit well above
/// f32 rounding noise.
pub fn gradient_check(
    config: ModelConfig,
    init_std: f32,
    samples: usize,
    eps: f32,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut model = TransformerModel::with_init_std(config, seed, init_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let seg = model.max_seq_len().min(6);
    let ids: Vec<TokenId> = (0..2 * seg).map(|_| rng.random_range(0..BYTE_VOCAB as TokenId)).collect();
    let targets: Vec<usize> = (0..2 * seg).map(|_| rng.random_range(0..BYTE_VOCAB)).collect();
    let weights: Vec<f32> = (0..2 * seg).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();

    let loss_of = |m: &TransformerModel| -> Result<f64> {
        let mut g = Graph::new();
        let (logits, _) = m.logits_graph(&mut g, &ids, seg)?;
        // f64 reduction keeps the difference quotient above f32 loss rounding
        Ok(ops::cross_entropy(&g.tensor(logits), &targets, &weights)?.loss)
    };
    let analytic: Vec<Vec<f32>> = {
        let mut g = Graph::new();
        let (logits, fwd) = model.logits_graph(&mut g, &ids, seg)?;
        let l = g.cross_entropy(logits, &targets, &weights)?;
        let grads = g.backward(l)?;
        fwd.params
            .iter()
            .zip(model.params())
            .map(|(v, p)| grads.get_or_zeros(*v, p.numel()))
            .collect()
    };
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut passed = 0;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let e = flat;
        let orig = model.params()[pi].data()[e];
        model.params_mut()[pi].data_mut()[e] = orig + eps;
        let lp = loss_of(&model)?;
        model.params_mut()[pi].data_mut()[e] = orig - eps;
        let lm = loss_of(&model)?;
        model.params_mut()[pi].data_mut()[e] = orig;
        let numeric = (lp - lm) / (2.0 * eps as f64);
        let a = analytic[pi][e] as f64;
        let r = rel_err(a, numeric);
        if r <= tolerance || (a - numeric).abs() <= 1e-5 {
            passed += 1;
        } else {
            worst = worst.max(r);
        }
    }
    Ok(GradCheckReport {
        sampled: samples,
        passed,
        tolerance,
        worst_rel_err: worst,
    })
}
