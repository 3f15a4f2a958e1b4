//! Linear probes on frozen hidden states.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tensor};
use crate::transformer::TransformerModel;

use super::REPORT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    MlmOnly,
    ArOnly,
    Concat,
}

impl ProbeSource {
    pub fn name(self) -> &'static str {
        match self {
            ProbeSource::MlmOnly => "mlm_only",
            ProbeSource::ArOnly => "ar_only",
            ProbeSource::Concat => "concat",
        }
    }
}

impl fmt::Display for ProbeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "mlm_only" | "mlm" => Ok(ProbeSource::MlmOnly),
            "ar_only" | "ar" => Ok(ProbeSource::ArOnly),
            "concat" => Ok(ProbeSource::Concat),
            _ => Err(Error::config("source", format!("unknown probe source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Leading fraction of sequences used for training; the rest is scored.
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            lr: 1e-4,
            batch_size: 32,
            train_frac: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub version: u32,
    pub source: Option<ProbeSource>,
    pub accuracy: f64,
    /// Binomial standard error of `accuracy`.
    pub stderr: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub config: ProbeConfig,
}

/// Per-token features for one sequence. The AR side reads `[BOS] + seq` and
/// contributes the row that has consumed token i.
pub fn probe_features(
    source: ProbeSource,
    ar: &TransformerModel,
    mlm: &TransformerModel,
    seq: &[TokenId],
) -> Result<Vec<Vec<f32>>> {
    let ar_rows = if source == ProbeSource::MlmOnly {
        None
    } else {
        if !ar.is_causal() {
            return Err(Error::Mode("probe AR source must be causal".into()));
        }
        let mut input = Vec::with_capacity(seq.len() + 1);
        input.push(BOS);
        input.extend_from_slice(seq);
        Some(ar.forward_hidden(&input)?)
    };
    let mlm_rows = if source == ProbeSource::ArOnly {
        None
    } else {
        if mlm.is_causal() {
            return Err(Error::Mode("probe MLM source must be bidirectional".into()));
        }
        Some(mlm.forward_hidden(seq)?)
    };
    Ok((0..seq.len())
        .map(|i| {
            let mut f = Vec::new();
            if let Some(h) = &ar_rows {
                f.extend_from_slice(h.row(i + 1));
            }
            if let Some(h) = &mlm_rows {
                f.extend_from_slice(h.row(i));
            }
            f
        })
        .collect())
}

/// Builds features for every sequence, splits by sequence and fits a probe.
pub fn probe_tagging(
    source: ProbeSource,
    ar: &TransformerModel,
    mlm: &TransformerModel,
    data: &[(Vec<TokenId>, Vec<usize>)],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let n_train_seqs = ((data.len() as f64) * cfg.train_frac).floor() as usize;
    if n_train_seqs == 0 || n_train_seqs >= data.len() {
        return Err(Error::contract(format!(
            "probe split of {} sequences at fraction {} leaves an empty side",
            data.len(),
            cfg.train_frac
        )));
    }
    let mut sets: [(Vec<Vec<f32>>, Vec<usize>); 2] = Default::default();
    for (k, (seq, labels)) in data.iter().enumerate() {
        if seq.len() != labels.len() {
            return Err(Error::contract(format!(
                "sequence {k} has {} tokens and {} labels",
                seq.len(),
                labels.len()
            )));
        }
        let side = &mut sets[usize::from(k >= n_train_seqs)];
        side.0.extend(probe_features(source, ar, mlm, seq)?);
        side.1.extend_from_slice(labels);
    }
    let [(train_x, train_y), (test_x, test_y)] = sets;
    let mut report = train_linear_probe(&train_x, &train_y, &test_x, &test_y, cfg)?;
    report.source = Some(source);
    Ok(report)
}

/// Softmax regression trained with Adam on mean cross-entropy.
pub fn train_linear_probe(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::contract("probe features and labels differ in count"));
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::contract("probe needs nonempty train and test sets"));
    }
    let classes: BTreeSet<usize> = train_y.iter().chain(test_y).copied().collect();
    if classes.len() < 2 {
        return Err(Error::contract(format!("probe needs at least 2 classes, found {}", classes.len())));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("probe", "batch_size must be positive and lr > 0"));
    }
    let c = classes.last().unwrap() + 1;
    let f = train_x[0].len();
    if train_x.iter().chain(test_x).any(|x| x.len() != f) {
        return Err(Error::contract("probe features have inconsistent widths"));
    }
    let mut w = Tensor::zeros(&[f, c]);
    let mut b = Tensor::zeros(&[c]);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut gw = vec![0.0f32; f * c];
    let mut gb = vec![0.0f32; c];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            gw.fill(0.0);
            gb.fill(0.0);
            let scale = 1.0 / batch.len() as f32;
            for &k in batch {
                let mut p = probs(&w, &b, &train_x[k]);
                p[train_y[k]] -= 1.0;
                for (j, pj) in p.iter().enumerate() {
                    let d = pj * scale;
                    gb[j] += d;
                    for (i, &x) in train_x[k].iter().enumerate() {
                        gw[i * c + j] += x * d;
                    }
                }
            }
            w.zero_grad();
            b.zero_grad();
            w.accumulate_grad(&gw)?;
            b.accumulate_grad(&gb)?;
            adam.step(&mut [&mut w, &mut b], cfg.lr as f32)?;
        }
    }
    let accuracy = accuracy(&w, &b, test_x, test_y);
    let n_test = test_x.len();
    Ok(ProbeReport {
        version: REPORT_VERSION,
        source: None,
        accuracy,
        stderr: (accuracy * (1.0 - accuracy) / n_test as f64).sqrt(),
        train_accuracy: self::accuracy(&w, &b, train_x, train_y),
        n_train: train_x.len(),
        n_test,
        num_classes: classes.len(),
        config: *cfg,
    })
}

fn logits(w: &Tensor, b: &Tensor, x: &[f32]) -> Vec<f32> {
    let c = b.numel();
    let mut z = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w.data()[i * c..(i + 1) * c];
        for (zj, &wij) in z.iter_mut().zip(row) {
            *zj += xi * wij;
        }
    }
    z
}

fn probs(w: &Tensor, b: &Tensor, x: &[f32]) -> Vec<f32> {
    let z = logits(w, b, x);
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn accuracy(w: &Tensor, b: &Tensor, xs: &[Vec<f32>], ys: &[usize]) -> f64 {
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| crate::numerics::ops::argmax(&logits(w, b, x)) == y)
        .count();
    hits as f64 / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_names_parse() {
        for s in [ProbeSource::MlmOnly, ProbeSource::ArOnly, ProbeSource::Concat] {
            assert_eq!(s.name().parse::<ProbeSource>().unwrap(), s);
        }
        assert_eq!("mlm-only".parse::<ProbeSource>().unwrap(), ProbeSource::MlmOnly);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        let r = train_linear_probe(&x, &[0, 0], &x, &[0, 0], &ProbeConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
