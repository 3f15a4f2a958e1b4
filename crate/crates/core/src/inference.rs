//! Infilling and sampling: KV-cached MARIA infill, its uncached oracle, the
//! left-to-right MLM baseline, unconditional generation and annealing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{TokenId, BOS, BYTE_VOCAB, MASK};
use crate::error::{Error, Result};
use crate::fusion::{ar_input, FusionHead};
use crate::masking::{sample_mask, MaskMode, MaskSet};
use crate::numerics::{ops, Tensor};
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Greedy,
    Temperature,
    Nucleus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub temperature: f64,
    #[serde(alias = "nucleus_p")]
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            kind: SamplerKind::Greedy,
            temperature: 1.0,
            top_p: 1.0,
            seed: 0,
        }
    }
}

impl SamplerSpec {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn temperature(t: f64, seed: u64) -> Self {
        SamplerSpec {
            kind: SamplerKind::Temperature,
            temperature: t,
            seed,
            ..Self::default()
        }
    }

    pub fn nucleus(p: f64, t: f64, seed: u64) -> Self {
        SamplerSpec {
            kind: SamplerKind::Nucleus,
            temperature: t,
            top_p: p,
            seed,
        }
    }

    /// `greedy`, `temperature:T` or `nucleus:P[:T]`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize, field: &str| -> Result<f64> {
            parts[i]
                .trim()
                .parse()
                .map_err(|_| Error::config(field, format!("not a number: {:?}", parts[i])))
        };
        let spec = match (parts[0].trim(), parts.len()) {
            ("greedy", 1) => Self::greedy(),
            ("temperature", 2) => Self::temperature(num(1, "sampler.temperature")?, seed),
            ("nucleus", 2) => Self::nucleus(num(1, "sampler.top_p")?, 1.0, seed),
            ("nucleus", 3) => Self::nucleus(num(1, "sampler.top_p")?, num(2, "sampler.temperature")?, seed),
            _ => {
                return Err(Error::config(
                    "sampler",
                    format!("expected greedy, temperature:T or nucleus:P[:T], got {s:?}"),
                ))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SamplerKind::Greedy {
            return Ok(());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::contract(format!(
                "sampler temperature must be > 0 (use greedy for t = 0), got {}",
                self.temperature
            )));
        }
        if self.kind == SamplerKind::Nucleus && !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::contract(format!("nucleus p must lie in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Draws one id from `logits`. Stochastic kinds consume exactly one uniform
/// draw and walk the ids in ascending order; greedy consumes nothing.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f32], spec: &SamplerSpec, rng: &mut R) -> Result<TokenId> {
    spec.validate()?;
    if logits.is_empty() {
        return Err(Error::contract("cannot sample from an empty logit vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sampler logits"));
    }
    if spec.kind == SamplerKind::Greedy {
        return Ok(ops::argmax(logits) as TokenId);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / spec.temperature).exp())
        .collect();
    let mut keep = vec![true; weights.len()];
    if spec.kind == SamplerKind::Nucleus && spec.top_p < 1.0 {
        let total: f64 = weights.iter().sum();
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        keep.fill(false);
        let mut mass = 0.0;
        for &i in &order {
            keep[i] = true;
            mass += weights[i] / total;
            if mass >= spec.top_p {
                break;
            }
        }
    }
    let total: f64 = weights.iter().zip(&keep).filter(|(_, &k)| k).map(|(w, _)| w).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, (&w, &k)) in weights.iter().zip(&keep).enumerate() {
        if !k {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return Ok(i as TokenId);
        }
    }
    Ok(last as TokenId)
}

fn sample_byte<R: Rng + ?Sized>(logits: &[f32], spec: &SamplerSpec, rng: &mut R) -> Result<TokenId> {
    sample_token(&logits[..logits.len().min(BYTE_VOCAB)], spec, rng)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InfillOptions {
    /// Recompute MLM hidden states after every `k` fills. Off by default.
    pub refresh_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfillOutput {
    pub tokens: Vec<TokenId>,
    pub ar_forwards: usize,
    /// Positions pushed through the AR model, summed over calls.
    pub ar_tokens: usize,
    pub mlm_forwards: usize,
}

fn check_input(tokens: &[TokenId], mask: &MaskSet, models: &[&TransformerModel]) -> Result<()> {
    if tokens.len() != mask.seq_len() {
        return Err(Error::contract(format!(
            "{} tokens but mask is over {} positions",
            tokens.len(),
            mask.seq_len()
        )));
    }
    for m in models {
        if tokens.len() > m.max_seq_len() {
            return Err(Error::Length {
                len: tokens.len(),
                max: m.max_seq_len(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= m.vocab_size()) {
            return Err(Error::Index {
                what: "token id",
                index: bad as usize,
                limit: m.vocab_size(),
            });
        }
    }
    if let Some(i) = (0..tokens.len()).find(|&i| tokens[i] == MASK && !mask.contains(i)) {
        return Err(Error::InputConsistency { index: i });
    }
    Ok(())
}

fn masked_buffer(tokens: &[TokenId], mask: &MaskSet) -> Vec<TokenId> {
    let mut buf = tokens.to_vec();
    for &i in mask.indices() {
        buf[i] = MASK;
    }
    buf
}

fn refresh_due(opts: &InfillOptions, k: usize) -> bool {
    matches!(opts.refresh_every, Some(r) if r > 0 && k > 0 && k % r == 0)
}

/// KV-cached infilling: one MLM pass, then the AR cache advances over each
/// span `[prev, c]` of the BOS-shifted buffer.
pub fn infill_cached(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    tokens: &[TokenId],
    mask: &MaskSet,
    sampler: &SamplerSpec,
) -> Result<InfillOutput> {
    infill_cached_with(ar, mlm, head, tokens, mask, sampler, &InfillOptions::default(), &mut sampler.rng())
}

#[allow(clippy::too_many_arguments)]
pub fn infill_cached_with<R: Rng + ?Sized>(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    tokens: &[TokenId],
    mask: &MaskSet,
    sampler: &SamplerSpec,
    opts: &InfillOptions,
    rng: &mut R,
) -> Result<InfillOutput> {
    head.check_compatible(ar, mlm)?;
    sampler.validate()?;
    check_input(tokens, mask, &[ar, mlm])?;
    let mut out = InfillOutput {
        tokens: masked_buffer(tokens, mask),
        ar_forwards: 0,
        ar_tokens: 0,
        mlm_forwards: 0,
    };
    if mask.is_empty() {
        return Ok(out);
    }
    let buf = &mut out.tokens;
    let mut mlm_hidden = mlm.forward_hidden(buf)?;
    out.mlm_forwards = 1;
    let mut cache = ar.new_cache();
    let mut prev = 0;
    for (k, &c) in mask.indices().iter().enumerate() {
        if refresh_due(opts, k) {
            mlm_hidden = mlm.forward_hidden(buf)?;
            out.mlm_forwards += 1;
        }
        let span: Vec<TokenId> = (prev..=c).map(|j| if j == 0 { BOS } else { buf[j - 1] }).collect();
        let h = ar.forward_cached(&span, &mut cache)?;
        out.ar_forwards += 1;
        out.ar_tokens += span.len();
        prev = c + 1;
        let logits = head.logits_row(h.row(h.rows() - 1), mlm_hidden.row(c))?;
        buf[c] = sample_byte(&logits, sampler, rng)?;
    }
    Ok(out)
}

/// Reference implementation: a full AR forward over the whole buffer for
/// every masked index.
pub fn infill_uncached(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    tokens: &[TokenId],
    mask: &MaskSet,
    sampler: &SamplerSpec,
) -> Result<InfillOutput> {
    infill_uncached_with(ar, mlm, head, tokens, mask, sampler, &InfillOptions::default(), &mut sampler.rng())
}

#[allow(clippy::too_many_arguments)]
pub fn infill_uncached_with<R: Rng + ?Sized>(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    tokens: &[TokenId],
    mask: &MaskSet,
    sampler: &SamplerSpec,
    opts: &InfillOptions,
    rng: &mut R,
) -> Result<InfillOutput> {
    head.check_compatible(ar, mlm)?;
    sampler.validate()?;
    check_input(tokens, mask, &[ar, mlm])?;
    let mut out = InfillOutput {
        tokens: masked_buffer(tokens, mask),
        ar_forwards: 0,
        ar_tokens: 0,
        mlm_forwards: 0,
    };
    if mask.is_empty() {
        return Ok(out);
    }
    let buf = &mut out.tokens;
    let mut mlm_hidden = mlm.forward_hidden(buf)?;
    out.mlm_forwards = 1;
    for (k, &c) in mask.indices().iter().enumerate() {
        if refresh_due(opts, k) {
            mlm_hidden = mlm.forward_hidden(buf)?;
            out.mlm_forwards += 1;
        }
        let h = ar.forward_hidden(&ar_input(buf))?;
        out.ar_forwards += 1;
        out.ar_tokens += buf.len();
        let logits = head.logits_row(h.row(c), mlm_hidden.row(c))?;
        buf[c] = sample_byte(&logits, sampler, rng)?;
    }
    Ok(out)
}

/// Baseline: fill masks left to right with a fresh MLM pass per position.
pub fn mlm_iterative_decode(
    mlm: &TransformerModel,
    tokens: &[TokenId],
    mask: &MaskSet,
    sampler: &SamplerSpec,
) -> Result<InfillOutput> {
    mlm_iterative_decode_with(mlm, tokens, mask, sampler, &mut sampler.rng())
}

pub fn mlm_iterative_decode_with<R: Rng + ?Sized>(
    mlm: &TransformerModel,
    tokens: &[TokenId],
    mask: &MaskSet,
    sampler: &SamplerSpec,
    rng: &mut R,
) -> Result<InfillOutput> {
    if mlm.is_causal() {
        return Err(Error::Mode("iterative decoding needs a bidirectional model".into()));
    }
    sampler.validate()?;
    check_input(tokens, mask, &[mlm])?;
    let mut out = InfillOutput {
        tokens: masked_buffer(tokens, mask),
        ar_forwards: 0,
        ar_tokens: 0,
        mlm_forwards: 0,
    };
    let d = mlm.d_model();
    for &c in mask.indices() {
        let h = mlm.forward_hidden(&out.tokens)?;
        out.mlm_forwards += 1;
        let row = Tensor::new(vec![1, d], h.row(c).to_vec())?;
        let logits = mlm.logits_from_hidden(&row)?;
        out.tokens[c] = sample_byte(logits.data(), sampler, rng)?;
    }
    Ok(out)
}

/// Ancestral sampling from BOS with a KV cache.
pub fn generate_unconditional(ar: &TransformerModel, length: usize, sampler: &SamplerSpec) -> Result<Vec<TokenId>> {
    generate_with(ar, length, sampler, &mut sampler.rng())
}

pub fn generate_with<R: Rng + ?Sized>(
    ar: &TransformerModel,
    length: usize,
    sampler: &SamplerSpec,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if !ar.is_causal() {
        return Err(Error::Mode("generation needs a causal model".into()));
    }
    sampler.validate()?;
    if length > ar.max_seq_len() {
        return Err(Error::Length {
            len: length,
            max: ar.max_seq_len(),
        });
    }
    let mut cache = ar.new_cache();
    let mut out = Vec::with_capacity(length);
    let mut next = BOS;
    for _ in 0..length {
        let h = ar.forward_cached(&[next], &mut cache)?;
        let logits = ar.logits_from_hidden(&h)?;
        next = sample_byte(logits.data(), sampler, rng)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    pub iterations: usize,
    pub remask_fraction: f64,
    pub seed: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            iterations: 10,
            remask_fraction: 0.3,
            seed: 0,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.remask_fraction) {
            return Err(Error::config(
                "remask_fraction",
                format!("must lie in [0, 1], got {}", self.remask_fraction),
            ));
        }
        Ok(())
    }

    /// Linear from 1 down to 0; a single iteration runs at 0.
    pub fn temperatures(&self) -> Vec<f64> {
        let n = self.iterations;
        match n {
            0 => Vec::new(),
            1 => vec![0.0],
            _ => (0..n).map(|i| 1.0 - i as f64 / (n - 1) as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealResult {
    pub tokens: Vec<TokenId>,
    /// The initial sample followed by the sequence after each iteration.
    pub trace: Vec<Vec<TokenId>>,
    pub temperatures: Vec<f64>,
}

pub fn simulated_anneal(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    length: usize,
    schedule: &AnnealSchedule,
) -> Result<AnnealResult> {
    schedule.validate()?;
    head.check_compatible(ar, mlm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut tokens = generate_with(ar, length, &SamplerSpec::temperature(1.0, schedule.seed), &mut rng)?;
    let temperatures = schedule.temperatures();
    let mut trace = vec![tokens.clone()];
    for &t in &temperatures {
        let sampler = if t <= 0.0 {
            SamplerSpec::greedy()
        } else {
            SamplerSpec::temperature(t, schedule.seed)
        };
        let mask = sample_mask(length, schedule.remask_fraction, MaskMode::Exact, &mut rng);
        let filled = infill_cached_with(ar, mlm, head, &tokens, &mask, &sampler, &InfillOptions::default(), &mut rng)?;
        tokens = filled.tokens;
        trace.push(tokens.clone());
    }
    Ok(AnnealResult {
        tokens,
        trace,
        temperatures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfillRequest {
    pub tokens: Vec<TokenId>,
    pub mask: Vec<usize>,
    #[serde(default)]
    pub sampler: SamplerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillResponse {
    pub tokens: Vec<TokenId>,
    pub ar_forwards: usize,
    pub mlm_forwards: usize,
    pub wall_ms: f64,
}

impl InfillRequest {
    pub fn mask_set(&self) -> Result<MaskSet> {
        MaskSet::from_unsorted(self.mask.clone(), self.tokens.len())
    }
}

pub fn serve_infill(
    ar: &TransformerModel,
    mlm: &TransformerModel,
    head: &FusionHead,
    req: &InfillRequest,
) -> Result<InfillResponse> {
    let mask = req.mask_set()?;
    let start = Instant::now();
    let out = infill_cached(ar, mlm, head, &req.tokens, &mask, &req.sampler)?;
    Ok(InfillResponse {
        tokens: out.tokens,
        ar_forwards: out.ar_forwards,
        mlm_forwards: out.mlm_forwards,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_picks_lowest_of_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&[9.0, 1.0, 1.0], &SamplerSpec::greedy(), &mut rng).unwrap(), 0);
        assert_eq!(sample_token(&[1.0, 3.0, 3.0], &SamplerSpec::greedy(), &mut rng).unwrap(), 1);
    }

    #[test]
    fn zero_temperature_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_token(&[1.0, 2.0], &SamplerSpec::temperature(0.0, 0), &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(SamplerSpec::nucleus(0.0, 1.0, 0).validate().is_err());
        assert!(SamplerSpec::nucleus(1.5, 1.0, 0).validate().is_err());
    }

    #[test]
    fn parse_sampler_strings() {
        assert_eq!(SamplerSpec::parse("greedy", 3).unwrap(), SamplerSpec::greedy());
        assert_eq!(SamplerSpec::parse("temperature:0.9", 3).unwrap(), SamplerSpec::temperature(0.9, 3));
        assert_eq!(SamplerSpec::parse("nucleus:0.8:0.5", 1).unwrap(), SamplerSpec::nucleus(0.8, 0.5, 1));
        assert!(SamplerSpec::parse("temperature:0", 0).is_err());
        assert!(SamplerSpec::parse("beam:4", 0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = AnnealSchedule {
            iterations: 5,
            ..Default::default()
        };
        assert_eq!(s.temperatures(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(AnnealSchedule {
            iterations: 0,
            ..Default::default()
        }
        .temperatures()
        .is_empty());
    }

    #[test]
    fn request_json_shape() {
        let req: InfillRequest = serde_json::from_str(r#"{"tokens":[104,256,105],"mask":[1]}"#).unwrap();
        assert_eq!(req.sampler, SamplerSpec::greedy());
        assert_eq!(req.mask_set().unwrap().indices(), &[1]);
        let s: SamplerSpec = serde_json::from_str(r#"{"kind":"nucleus","nucleus_p":0.9}"#).unwrap();
        assert_eq!(s.top_p, 0.9);
    }
}
