//! Mask distributions, mask sets, and the conditioning set `c(i, m)`.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{TokenId, MASK};
use crate::error::{Error, Result};

/// Sorted, duplicate-free masked positions of a sequence of length `seq_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMaskSet")]
pub struct MaskSet {
    indices: Vec<usize>,
    seq_len: usize,
}

#[derive(Deserialize)]
struct RawMaskSet {
    indices: Vec<usize>,
    seq_len: usize,
}

impl TryFrom<RawMaskSet> for MaskSet {
    type Error = Error;

    fn try_from(r: RawMaskSet) -> Result<Self> {
        MaskSet::new(r.indices, r.seq_len)
    }
}

impl MaskSet {
    /// `indices` must be strictly increasing and below `seq_len`.
    pub fn new(indices: Vec<usize>, seq_len: usize) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "mask indices must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= seq_len {
                return Err(Error::Index {
                    what: "mask index",
                    index: last,
                    limit: seq_len,
                });
            }
        }
        Ok(Self { indices, seq_len })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(mut indices: Vec<usize>, seq_len: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, seq_len)
    }

    pub fn empty(seq_len: usize) -> Self {
        Self {
            indices: Vec::new(),
            seq_len,
        }
    }

    pub fn full(seq_len: usize) -> Self {
        Self {
            indices: (0..seq_len).collect(),
            seq_len,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// 0/1 weight per position.
    pub fn weights(&self) -> Vec<f32> {
        let mut w = vec![0.0; self.seq_len];
        for &i in &self.indices {
            w[i] = 1.0;
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRateKind {
    Beta,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskRateSpec {
    pub kind: MaskRateKind,
    pub alpha: f64,
    pub beta: f64,
    pub fixed_rate: f64,
}

impl Default for MaskRateSpec {
    fn default() -> Self {
        Self::beta(2.5, 2.5)
    }
}

impl MaskRateSpec {
    pub fn beta(alpha: f64, beta: f64) -> Self {
        Self {
            kind: MaskRateKind::Beta,
            alpha,
            beta,
            fixed_rate: 0.5,
        }
    }

    pub fn fixed(rate: f64) -> Self {
        Self {
            kind: MaskRateKind::Fixed,
            fixed_rate: rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("mask_rate.alpha", "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("mask_rate.beta", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fixed_rate) {
            return Err(Error::config("mask_rate.fixed_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Draws a mask rate. Beta variates come from the ratio `X/(X+Y)` of two
/// independent `Gamma(α,1)`, `Gamma(β,1)` draws.
pub fn sample_mask_rate<R: Rng + ?Sized>(spec: &MaskRateSpec, rng: &mut R) -> Result<f64> {
    spec.validate()?;
    match spec.kind {
        MaskRateKind::Fixed => Ok(spec.fixed_rate),
        MaskRateKind::Beta => {
            let ga = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::config("mask_rate.alpha", e.to_string()))?;
            let gb = Gamma::new(spec.beta, 1.0).map_err(|e| Error::config("mask_rate.beta", e.to_string()))?;
            let x = ga.sample(rng);
            let y = gb.sample(rng);
            Ok(if x + y > 0.0 { x / (x + y) } else { 0.5 })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// exactly `round(rate · n)` positions, uniformly without replacement
    #[default]
    Exact,
    /// each position independently with probability `rate`
    Bernoulli,
}

pub fn exact_count(seq_len: usize, rate: f64) -> usize {
    ((rate.clamp(0.0, 1.0) * seq_len as f64).round() as usize).min(seq_len)
}

pub fn sample_mask<R: Rng + ?Sized>(seq_len: usize, rate: f64, mode: MaskMode, rng: &mut R) -> MaskSet {
    let rate = rate.clamp(0.0, 1.0);
    let indices = match mode {
        MaskMode::Exact => {
            let mut idx = index::sample(rng, seq_len, exact_count(seq_len, rate)).into_vec();
            idx.sort_unstable();
            idx
        }
        MaskMode::Bernoulli => (0..seq_len).filter(|_| rng.random_bool(rate)).collect(),
    };
    MaskSet { indices, seq_len }
}

/// Exact-count masks for several rates drawn from one random permutation, so
/// the mask at a lower rate is a subset of the mask at any higher rate.
pub fn nested_masks<R: Rng + ?Sized>(seq_len: usize, rates: &[f64], rng: &mut R) -> Vec<MaskSet> {
    let perm = index::sample(rng, seq_len, seq_len).into_vec();
    rates
        .iter()
        .map(|&r| {
            let mut idx = perm[..exact_count(seq_len, r)].to_vec();
            idx.sort_unstable();
            MaskSet { indices: idx, seq_len }
        })
        .collect()
}

/// Tokens with MASK substituted at the masked positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<TokenId>,
    pub mask: MaskSet,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Puts `originals[i]` back at every masked `i`.
    pub fn restore(&self, originals: &[TokenId]) -> Result<Vec<TokenId>> {
        if originals.len() != self.tokens.len() {
            return Err(Error::contract(format!(
                "restore with {} originals for a sequence of {}",
                originals.len(),
                self.tokens.len()
            )));
        }
        let mut out = self.tokens.clone();
        for &i in self.mask.indices() {
            out[i] = originals[i];
        }
        Ok(out)
    }
}

pub fn apply_mask(tokens: &[TokenId], mask: &MaskSet) -> Result<MaskedSequence> {
    if mask.seq_len() != tokens.len() {
        return Err(Error::contract(format!(
            "mask for length {} applied to {} tokens",
            mask.seq_len(),
            tokens.len()
        )));
    }
    let mut out = tokens.to_vec();
    for &i in mask.indices() {
        out[i] = MASK;
    }
    Ok(MaskedSequence {
        tokens: out,
        mask: mask.clone(),
    })
}

/// Byte spans `[start, end)` of words: maximal runs of bytes that are not
/// ASCII whitespace or ASCII punctuation. Non-ASCII bytes count as word bytes
/// so multibyte letters stay inside their word.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let is_word = |b: u8| b.is_ascii_alphanumeric() || b >= 0x80;
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if is_word(bytes[i]) {
            let start = i;
            while i < bytes.len() && is_word(bytes[i]) {
                i += 1;
            }
            spans.push((start, i));
        } else {
            i += 1;
        }
    }
    spans
}

/// Masks `⌊fraction · #words⌋` uniformly chosen words, every byte of each.
pub fn mask_words<R: Rng + ?Sized>(text: &str, fraction: f64, rng: &mut R) -> Result<(Vec<TokenId>, MaskSet)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("fraction", "must lie in [0, 1]"));
    }
    let tokens: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
    let spans = word_spans(text);
    if spans.is_empty() {
        log::warn!("mask_words: text has no words, nothing masked");
        return Ok((tokens, MaskSet::empty(text.len())));
    }
    let k = (fraction * spans.len() as f64).floor() as usize;
    let chosen = index::sample(rng, spans.len(), k);
    let mut idx: Vec<usize> = chosen.iter().flat_map(|w| spans[w].0..spans[w].1).collect();
    idx.sort_unstable();
    let mask = MaskSet::new(idx, text.len())?;
    let masked = apply_mask(&tokens, &mask)?;
    Ok((masked.tokens, mask))
}

/// `c(i, m) = {0..i} ∪ {j > i : j ∉ m}`.
pub fn context_set(i: usize, mask: &MaskSet) -> Result<Vec<usize>> {
    if !mask.contains(i) {
        return Err(Error::contract(format!("position {i} is not masked")));
    }
    Ok((0..i).chain((i + 1..mask.seq_len()).filter(|&j| !mask.contains(j))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_set_json_shape() {
        let m = MaskSet::new(vec![1, 4], 6).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"indices":[1,4],"seq_len":6}"#);
        assert_eq!(serde_json::from_str::<MaskSet>(&s).unwrap(), m);
        assert!(serde_json::from_str::<MaskSet>(r#"{"indices":[4,1],"seq_len":6}"#).is_err());
        assert!(serde_json::from_str::<MaskSet>(r#"{"indices":[6],"seq_len":6}"#).is_err());
    }

    #[test]
    fn context_set_examples() {
        let m = MaskSet::new(vec![2], 5).unwrap();
        assert_eq!(context_set(2, &m).unwrap(), vec![0, 1, 3, 4]);
        let m = MaskSet::new(vec![1, 3], 5).unwrap();
        assert_eq!(context_set(1, &m).unwrap(), vec![0, 2, 4]);
        assert!(context_set(0, &MaskSet::full(5)).unwrap().is_empty());
        assert!(context_set(0, &m).is_err());
    }

    #[test]
    fn rate_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [MaskMode::Exact, MaskMode::Bernoulli] {
            assert!(sample_mask(20, 0.0, mode, &mut rng).is_empty());
            assert_eq!(sample_mask(20, 1.0, mode, &mut rng).len(), 20);
        }
        assert_eq!(sample_mask(100, 0.5, MaskMode::Exact, &mut rng).len(), 50);
    }

    #[test]
    fn fixed_rate_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask_rate(&MaskRateSpec::fixed(0.3), &mut rng).unwrap(), 0.3);
    }

    #[test]
    fn nested_masks_are_nested() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ms = nested_masks(64, &[0.1, 0.5, 0.9], &mut rng);
        assert_eq!(ms.iter().map(MaskSet::len).collect::<Vec<_>>(), vec![6, 32, 58]);
        assert!(ms[0].indices().iter().all(|&i| ms[1].contains(i)));
        assert!(ms[1].indices().iter().all(|&i| ms[2].contains(i)));
    }
}
