//! The fused decoding head: a linear map from `[h_ar ; h_mlm]` to vocabulary
//! logits, its product initialisation, hidden-state alignment and loss.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::checkpoint::{self, Checkpoint, CheckpointKind, ToCheckpoint};
use crate::data::tokenizer::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::masking::MaskedSequence;
use crate::numerics::{kernels, ops, Graph, Tensor};
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionInit {
    Product,
    Random,
}

impl std::fmt::Display for FusionInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionInit::Product => "product",
            FusionInit::Random => "random",
        })
    }
}

impl std::str::FromStr for FusionInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(FusionInit::Product),
            "random" => Ok(FusionInit::Random),
            other => Err(Error::config("init", format!("expected product or random, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadConfig {
    d1: usize,
    d2: usize,
    v: usize,
    init: FusionInit,
    train_steps: u64,
    bias: bool,
}

/// `W3 [(d1+d2) × v]` plus an optional zero-initialised bias (ablation only).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub w3: Tensor,
    pub bias: Option<Tensor>,
    d1: usize,
    d2: usize,
    v: usize,
    init: FusionInit,
    pub train_steps: u64,
}

impl FusionHead {
    /// `W3 = [W1/2 ; W2/2]`, so the fused logits are the mean of the two base
    /// models' logits.
    pub fn from_product(w1: &Tensor, w2: &Tensor) -> Result<Self> {
        let (d1, v1) = (w1.rows(), w1.cols());
        let (d2, v2) = (w2.rows(), w2.cols());
        if v1 != v2 {
            return Err(Error::contract(format!(
                "vocabulary mismatch: AR head has {v1} outputs, MLM head has {v2}"
            )));
        }
        let data: Vec<f32> = w1.data().iter().chain(w2.data()).map(|x| x * 0.5).collect();
        let mut w3 = Tensor::new(vec![d1 + d2, v1], data)?;
        w3.set_requires_grad(true);
        Ok(Self {
            w3,
            bias: None,
            d1,
            d2,
            v: v1,
            init: FusionInit::Product,
            train_steps: 0,
        })
    }

    pub fn init_product(ar: &TransformerModel, mlm: &TransformerModel) -> Result<Self> {
        Self::from_product(&ar.head, &mlm.head)
    }

    /// Entries drawn from `N(0, 2/(d1+d2+v))`.
    pub fn init_random(d1: usize, d2: usize, v: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / (d1 + d2 + v) as f32).sqrt();
        let mut w3 = Tensor::randn(&[d1 + d2, v], std, &mut rng);
        w3.set_requires_grad(true);
        Self {
            w3,
            bias: None,
            d1,
            d2,
            v,
            init: FusionInit::Random,
            train_steps: 0,
        }
    }

    pub fn new(init: FusionInit, ar: &TransformerModel, mlm: &TransformerModel, seed: u64) -> Result<Self> {
        let head = match init {
            FusionInit::Product => Self::init_product(ar, mlm)?,
            FusionInit::Random => Self::init_random(ar.d_model(), mlm.d_model(), ar.vocab_size(), seed),
        };
        head.check_compatible(ar, mlm)?;
        Ok(head)
    }

    pub fn with_bias(mut self) -> Self {
        let mut b = Tensor::zeros(&[self.v]);
        b.set_requires_grad(true);
        self.bias = Some(b);
        self
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn init_kind(&self) -> FusionInit {
        self.init
    }

    pub fn check_compatible(&self, ar: &TransformerModel, mlm: &TransformerModel) -> Result<()> {
        let checks = [
            ("d1 (AR width)", self.d1, ar.d_model()),
            ("d2 (MLM width)", self.d2, mlm.d_model()),
            ("v (AR vocabulary)", self.v, ar.vocab_size()),
            ("v (MLM vocabulary)", self.v, mlm.vocab_size()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(Error::contract(format!(
                    "fusion head {what}: head expects {expected}, model has {actual}"
                )));
            }
        }
        if !ar.is_causal() {
            return Err(Error::Mode("first base model must be causal".into()));
        }
        if mlm.is_causal() {
            return Err(Error::Mode("second base model must be bidirectional".into()));
        }
        Ok(())
    }

    /// Logits for one position from one AR row and one MLM row.
    pub fn logits_row(&self, h1: &[f32], h2: &[f32]) -> Result<Vec<f32>> {
        if h1.len() != self.d1 || h2.len() != self.d2 {
            return Err(Error::contract(format!(
                "fusion head expects widths ({}, {}), got ({}, {})",
                self.d1,
                self.d2,
                h1.len(),
                h2.len()
            )));
        }
        let mut x = Vec::with_capacity(self.d1 + self.d2);
        x.extend_from_slice(h1);
        x.extend_from_slice(h2);
        let mut out = kernels::matmul(&x, self.w3.data(), 1, self.d1 + self.d2, self.v);
        if let Some(b) = &self.bias {
            kernels::add_bias_rows(&mut out, b.data());
        }
        Ok(out)
    }

    /// `[h1 ; h2] · W3` for every row.
    pub fn fusion_logits(&self, h1: &Tensor, h2: &Tensor) -> Result<Tensor> {
        if h1.shape().len() != 2 || h2.shape().len() != 2 || h1.rows() != h2.rows() {
            return Err(Error::contract(format!(
                "fusion inputs must be matching matrices, got {:?} and {:?}",
                h1.shape(),
                h2.shape()
            )));
        }
        if h1.cols() != self.d1 || h2.cols() != self.d2 {
            return Err(Error::contract(format!(
                "fusion head expects widths ({}, {}), got ({}, {})",
                self.d1,
                self.d2,
                h1.cols(),
                h2.cols()
            )));
        }
        let x = concat_rows(h1, h2);
        let mut out = kernels::matmul(&x, self.w3.data(), h1.rows(), self.d1 + self.d2, self.v);
        if let Some(b) = &self.bias {
            kernels::add_bias_rows(&mut out, b.data());
        }
        Tensor::new(vec![h1.rows(), self.v], out)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w3];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }

    /// Mean masked NLL over `batches` with its gradient accumulated into `W3`
    /// (and the bias when present).
    pub fn loss_and_accumulate(&mut self, batches: &[AlignedBatch]) -> Result<LossValue> {
        let masked: f32 = batches.iter().flat_map(|b| b.loss_mask.iter()).sum();
        let loss = self.accumulate_scaled(batches, masked)?;
        Ok(LossValue {
            loss,
            masked: masked as usize,
            empty: masked == 0.0,
        })
    }

    /// Accumulates the gradient of `Σ w_i · nll_i / total` and returns that
    /// value. Splitting one batch into parts that share `total` sums to the
    /// full-batch mean.
    pub fn accumulate_scaled(&mut self, batches: &[AlignedBatch], total: f32) -> Result<f64> {
        let (x, targets, mut weights) = stack(batches, self.d1, self.d2)?;
        let norm = if total > 0.0 { 1.0 / total } else { 0.0 };
        for w in &mut weights {
            *w *= norm;
        }
        let n = targets.len();
        let (value, gw, gb) = {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![n, self.d1 + self.d2], x)?);
            let w = g.param(&self.w3);
            let mut logits = g.matmul(xv, w)?;
            let bv = self.bias.as_ref().map(|b| g.param(b));
            if let Some(bv) = bv {
                logits = g.add_row(logits, bv)?;
            }
            let loss = g.cross_entropy_sum(logits, &targets, &weights)?;
            let value = g.scalar(loss) as f64;
            let grads = g.backward(loss)?;
            let gw = grads.get(w).map(<[f32]>::to_vec);
            let gb = bv.and_then(|b| grads.get(b).map(<[f32]>::to_vec));
            (value, gw, gb)
        };
        if let Some(gw) = gw {
            self.w3.accumulate_grad(&gw)?;
        }
        if let (Some(b), Some(gb)) = (&mut self.bias, gb) {
            b.accumulate_grad(&gb)?;
        }
        Ok(value)
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Fusion)?;
        let cfg: HeadConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Integrity(format!("fusion config in checkpoint: {e}")))?;
        let mut w3 = ckpt.take("w3")?;
        if w3.shape() != [cfg.d1 + cfg.d2, cfg.v] {
            return Err(Error::Shape {
                op: "load fusion head",
                lhs: vec![cfg.d1 + cfg.d2, cfg.v],
                rhs: w3.shape().to_vec(),
            });
        }
        w3.set_requires_grad(true);
        let bias = if cfg.bias {
            let mut b = ckpt.take("bias")?;
            if b.shape() != [cfg.v] {
                return Err(Error::Shape {
                    op: "load fusion bias",
                    lhs: vec![cfg.v],
                    rhs: b.shape().to_vec(),
                });
            }
            b.set_requires_grad(true);
            Some(b)
        } else {
            None
        };
        Ok(Self {
            w3,
            bias,
            d1: cfg.d1,
            d2: cfg.d2,
            v: cfg.v,
            init: cfg.init,
            train_steps: cfg.train_steps,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_checkpoint(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(checkpoint::load_checkpoint(path)?)
    }

    /// Loads and checks widths against the two base models.
    pub fn load_for(path: impl AsRef<Path>, ar: &TransformerModel, mlm: &TransformerModel) -> Result<Self> {
        let head = Self::load(path)?;
        head.check_compatible(ar, mlm)?;
        Ok(head)
    }
}

impl ToCheckpoint for FusionHead {
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let cfg = HeadConfig {
            d1: self.d1,
            d2: self.d2,
            v: self.v,
            init: self.init,
            train_steps: self.train_steps,
            bias: self.bias.is_some(),
        };
        let mut tensors = vec![("w3".to_string(), Tensor::new(self.w3.shape().to_vec(), self.w3.data().to_vec())?)];
        if let Some(b) = &self.bias {
            tensors.push(("bias".to_string(), Tensor::new(b.shape().to_vec(), b.data().to_vec())?));
        }
        Ok(Checkpoint {
            kind: CheckpointKind::Fusion,
            config: serde_json::to_value(cfg)?,
            tensors,
        })
    }
}

fn concat_rows(h1: &Tensor, h2: &Tensor) -> Vec<f32> {
    let mut x = Vec::with_capacity(h1.numel() + h2.numel());
    for r in 0..h1.rows() {
        x.extend_from_slice(h1.row(r));
        x.extend_from_slice(h2.row(r));
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub masked: usize,
    /// no masked positions contributed
    pub empty: bool,
}

/// Hidden states of both base models aligned so that row `i` of each block
/// belongs to target position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    /// AR states on `[BOS] + clean[..n-1]`: row `i` conditions on `clean[..i]`
    pub ar_hidden: Tensor,
    /// MLM states on the masked sequence
    pub mlm_hidden: Tensor,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<f32>,
}

impl AlignedBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// `[BOS] + tokens[..n-1]`.
pub fn ar_input(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    if !tokens.is_empty() {
        out.push(BOS);
        out.extend_from_slice(&tokens[..tokens.len() - 1]);
    }
    out
}

pub fn align_hidden(
    clean: &[TokenId],
    masked: &MaskedSequence,
    ar: &TransformerModel,
    mlm: &TransformerModel,
) -> Result<AlignedBatch> {
    if clean.len() != masked.len() {
        return Err(Error::contract(format!(
            "clean sequence has {} tokens, masked sequence {}",
            clean.len(),
            masked.len()
        )));
    }
    if masked.mask.seq_len() != clean.len() {
        return Err(Error::contract("mask length differs from sequence length"));
    }
    let ar_hidden = ar.forward_hidden(&ar_input(clean))?;
    let mlm_hidden = mlm.forward_hidden(&masked.tokens)?;
    Ok(AlignedBatch {
        ar_hidden,
        mlm_hidden,
        targets: clean.iter().map(|&t| t as usize).collect(),
        loss_mask: masked.mask.weights(),
    })
}

fn stack(batches: &[AlignedBatch], d1: usize, d2: usize) -> Result<(Vec<f32>, Vec<usize>, Vec<f32>)> {
    let mut x = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for b in batches {
        if b.ar_hidden.cols() != d1 || b.mlm_hidden.cols() != d2 {
            return Err(Error::contract(format!(
                "aligned batch widths ({}, {}) do not match head ({d1}, {d2})",
                b.ar_hidden.cols(),
                b.mlm_hidden.cols()
            )));
        }
        if b.ar_hidden.rows() != b.len() || b.mlm_hidden.rows() != b.len() || b.loss_mask.len() != b.len() {
            return Err(Error::contract("aligned batch blocks differ in length"));
        }
        x.extend(concat_rows(&b.ar_hidden, &b.mlm_hidden));
        targets.extend_from_slice(&b.targets);
        weights.extend_from_slice(&b.loss_mask);
    }
    Ok((x, targets, weights))
}

/// Mean over masked positions of `−log π(x_i | c(i, m))`; 0 with `empty` set
/// when nothing is masked.
pub fn maria_loss(head: &FusionHead, aligned: &AlignedBatch) -> Result<LossValue> {
    maria_loss_many(head, std::slice::from_ref(aligned))
}

pub fn maria_loss_many(head: &FusionHead, batches: &[AlignedBatch]) -> Result<LossValue> {
    let (x, targets, weights) = stack(batches, head.d1, head.d2)?;
    let n = targets.len();
    let mut logits = kernels::matmul(&x, head.w3.data(), n, head.d1 + head.d2, head.v);
    if let Some(b) = &head.bias {
        kernels::add_bias_rows(&mut logits, b.data());
    }
    let ce = ops::cross_entropy(&Tensor::new(vec![n, head.v], logits)?, &targets, &weights)?;
    if ce.empty {
        log::warn!("maria_loss: no masked positions");
    }
    Ok(LossValue {
        loss: ce.loss,
        masked: ce.weight as usize,
        empty: ce.empty,
    })
}
