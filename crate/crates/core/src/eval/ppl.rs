//! Exact-likelihood perplexities: teacher-forced masked perplexity for the
//! fused model, the AR model and the MLM with left-to-right reveal, plus
//! rolling and generative perplexity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::Window;
use crate::data::tokenizer::TokenId;
use crate::error::{Error, Result};
use crate::fusion::{ar_input, FusionHead};
use crate::masking::{apply_mask, nested_masks, MaskSet};
use crate::numerics::{ops, Tensor};
use crate::transformer::TransformerModel;

/// Below this many scored tokens an entry is flagged as insufficient.
pub const MIN_SCORED_TOKENS: usize = 100;

pub const METHODS: [&str; 3] = ["maria", "ar", "mlm_ardecode"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplEntry {
    pub method: String,
    pub rate: f64,
    pub nll_sum: f64,
    pub tokens: usize,
    pub ppl: f64,
    pub insufficient: bool,
    /// Model forward passes spent (both bases counted).
    pub forwards: usize,
}

impl PplEntry {
    fn new(method: &str, rate: f64, nll_sum: f64, tokens: usize, forwards: usize) -> Self {
        let ppl = if tokens == 0 { f64::NAN } else { (nll_sum / tokens as f64).exp() };
        PplEntry {
            method: method.into(),
            rate,
            nll_sum,
            tokens,
            ppl,
            insufficient: tokens < MIN_SCORED_TOKENS,
            forwards,
        }
    }
}

/// Exact-count masks, one per window. Window `k` draws from its own stream
/// derived from `seed`, and masks for different rates under one seed are
/// nested prefixes of the same permutation.
pub fn rate_masks(windows: &[Window], rate: f64, seed: u64) -> Result<Vec<MaskSet>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("mask rate must lie in [0, 1], got {rate}")));
    }
    Ok(windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            nested_masks(w.tokens.len(), &[rate], &mut rng).remove(0)
        })
        .collect())
}

fn target(t: TokenId) -> usize {
    t as usize
}

fn row_tensor(h: &Tensor, i: usize) -> Result<Tensor> {
    Tensor::new(vec![1, h.cols()], h.row(i).to_vec())
}

pub fn masked_ppl_maria(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    windows: &[Window],
    rate: f64,
    seed: u64,
) -> Result<PplEntry> {
    let masks = rate_masks(windows, rate, seed)?;
    masked_ppl_maria_with(ar, mlm, head, windows, &masks, rate)
}

/// The AR side always sees the true prefix.
pub fn masked_ppl_maria_with(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    windows: &[Window],
    masks: &[MaskSet],
    rate: f64,
) -> Result<PplEntry> {
    head.check_compatible(ar, mlm)?;
    check_pairs(windows, masks)?;
    let (mut nll, mut n, mut forwards) = (0.0, 0, 0);
    for (w, m) in windows.iter().zip(masks) {
        if m.is_empty() {
            continue;
        }
        let h1 = ar.forward_hidden(&ar_input(&w.tokens))?;
        let h2 = mlm.forward_hidden(&apply_mask(&w.tokens, m)?.tokens)?;
        forwards += 2;
        for &i in m.indices() {
            nll += ops::nll(&head.logits_row(h1.row(i), h2.row(i))?, target(w.tokens[i]));
            n += 1;
        }
    }
    Ok(PplEntry::new("maria", rate, nll, n, forwards))
}

pub fn masked_ppl_ar(ar: &TransformerModel, windows: &[Window], rate: f64, seed: u64) -> Result<PplEntry> {
    let masks = rate_masks(windows, rate, seed)?;
    masked_ppl_ar_with(ar, windows, &masks, rate)
}

pub fn masked_ppl_ar_with(ar: &TransformerModel, windows: &[Window], masks: &[MaskSet], rate: f64) -> Result<PplEntry> {
    if !ar.is_causal() {
        return Err(Error::Mode("AR perplexity needs a causal model".into()));
    }
    check_pairs(windows, masks)?;
    let (mut nll, mut n, mut forwards) = (0.0, 0, 0);
    for (w, m) in windows.iter().zip(masks) {
        if m.is_empty() {
            continue;
        }
        let logits = ar.forward_logits(&ar_input(&w.tokens))?;
        forwards += 1;
        for &i in m.indices() {
            nll += ops::nll(logits.row(i), target(w.tokens[i]));
            n += 1;
        }
    }
    Ok(PplEntry::new("ar", rate, nll, n, forwards))
}

pub fn masked_ppl_mlm_ardecode(mlm: &TransformerModel, windows: &[Window], rate: f64, seed: u64) -> Result<PplEntry> {
    let masks = rate_masks(windows, rate, seed)?;
    masked_ppl_mlm_ardecode_with(mlm, windows, &masks, rate)
}

/// Chain rule over the masked positions in ascending order; each step runs
/// the MLM on the current buffer, then reveals the true token.
pub fn masked_ppl_mlm_ardecode_with(
    mlm: &TransformerModel,
    windows: &[Window],
    masks: &[MaskSet],
    rate: f64,
) -> Result<PplEntry> {
    if mlm.is_causal() {
        return Err(Error::Mode("MLM decode perplexity needs a bidirectional model".into()));
    }
    check_pairs(windows, masks)?;
    let (mut nll, mut n, mut forwards) = (0.0, 0, 0);
    for (w, m) in windows.iter().zip(masks) {
        let mut buf = apply_mask(&w.tokens, m)?.tokens;
        for &i in m.indices() {
            let h = mlm.forward_hidden(&buf)?;
            forwards += 1;
            let logits = mlm.logits_from_hidden(&row_tensor(&h, i)?)?;
            nll += ops::nll(logits.data(), target(w.tokens[i]));
            n += 1;
            buf[i] = w.tokens[i];
        }
    }
    Ok(PplEntry::new("mlm_ardecode", rate, nll, n, forwards))
}

fn check_pairs(windows: &[Window], masks: &[MaskSet]) -> Result<()> {
    if windows.len() != masks.len() {
        return Err(Error::contract(format!("{} windows but {} masks", windows.len(), masks.len())));
    }
    for (w, m) in windows.iter().zip(masks) {
        if w.tokens.len() != m.seq_len() {
            return Err(Error::contract(format!(
                "window of {} tokens paired with a mask over {}",
                w.tokens.len(),
                m.seq_len()
            )));
        }
    }
    Ok(())
}

/// Summed NLL of every token of `tokens` under the causal model, starting
/// from BOS. Returns `(nll_sum, count)`.
pub fn sequence_nll(ar: &TransformerModel, tokens: &[TokenId]) -> Result<(f64, usize)> {
    if !ar.is_causal() {
        return Err(Error::Mode("sequence scoring needs a causal model".into()));
    }
    if tokens.is_empty() {
        return Ok((0.0, 0));
    }
    let logits = ar.forward_logits(&ar_input(tokens))?;
    let nll = tokens.iter().enumerate().map(|(i, &t)| ops::nll(logits.row(i), target(t))).sum();
    Ok((nll, tokens.len()))
}

/// Splits the stream into consecutive chunks of `window` tokens (the last
/// may be shorter), scores each from a fresh BOS and normalizes by the total
/// token count.
pub fn rolling_ppl(ar: &TransformerModel, stream: &[TokenId], window: usize) -> Result<PplEntry> {
    if window == 0 || window > ar.max_seq_len() {
        return Err(Error::contract(format!(
            "rolling window must lie in 1..={}, got {window}",
            ar.max_seq_len()
        )));
    }
    let (mut nll, mut n, mut forwards) = (0.0, 0, 0);
    for chunk in stream.chunks(window) {
        let (s, c) = sequence_nll(ar, chunk)?;
        nll += s;
        n += c;
        forwards += 1;
    }
    Ok(PplEntry::new("rolling", 1.0, nll, n, forwards))
}

/// Mean over samples of `exp(mean token NLL)` under the scorer.
pub fn generative_ppl(scorer: &TransformerModel, samples: &[Vec<TokenId>]) -> Result<f64> {
    let per = per_sample_ppl(scorer, samples)?;
    if per.is_empty() {
        return Err(Error::contract("generative perplexity needs at least one nonempty sample"));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn per_sample_ppl(scorer: &TransformerModel, samples: &[Vec<TokenId>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples.iter().filter(|s| !s.is_empty()) {
        let (nll, n) = sequence_nll(scorer, s)?;
        out.push((nll / n as f64).exp());
    }
    Ok(out)
}
