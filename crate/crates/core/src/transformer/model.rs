use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::checkpoint::{self, Checkpoint, CheckpointKind, ToCheckpoint};
use crate::data::tokenizer::TokenId;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, AttnShape};
use crate::numerics::{Graph, Tensor, Var};
use crate::transformer::{AttentionMode, KvCache, ModelConfig};

pub const INIT_STD: f32 = 0.02;

const BLOCK_NAMES: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gain", "ln2.bias", "ffn.w_in", "ffn.b_in", "ffn.w_out", "ffn.b_out",
];

/// One pre-norm block: `x += attn(ln1(x)); x += ffn(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl Block {
    fn new<R: Rng>(d: usize, f: usize, std: f32, rng: &mut R) -> Self {
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], std, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], std, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], std, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], std, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w_in: Tensor::randn(&[d, f], std, rng),
            b_in: Tensor::zeros(&[f]),
            w_out: Tensor::randn(&[f, d], std, rng),
            b_out: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Transformer language model with learned absolute positions and an untied
/// output head `W [d×v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub head: Tensor,
    frozen: bool,
}

/// Graph handles produced by [`TransformerModel::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    /// final hidden states `[rows × d]`
    pub hidden: Var,
    /// one var per parameter, in [`TransformerModel::params`] order
    pub params: Vec<Var>,
}

impl GraphForward {
    pub fn head(&self) -> Var {
        *self.params.last().expect("model has parameters")
    }
}

impl TransformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init_std(config, seed, INIT_STD)
    }

    pub fn with_init_std(config: ModelConfig, seed: u64, std: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = Tensor::randn(&[config.vocab_size, d], std, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(d, config.ffn_dim(), std, &mut rng))
            .collect();
        let head = Tensor::randn(&[d, config.vocab_size], std, &mut rng);
        let mut model = Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gain: Tensor::full(&[d], 1.0),
            ln_f_bias: Tensor::zeros(&[d]),
            head,
            config,
            frozen: false,
        };
        model.set_trainable(true);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    pub fn is_causal(&self) -> bool {
        self.config.is_causal()
    }

    pub fn kind(&self) -> CheckpointKind {
        match self.config.attention {
            AttentionMode::Causal => CheckpointKind::Ar,
            AttentionMode::Bidirectional => CheckpointKind::Mlm,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter as not requiring gradients; accumulating into
    /// a frozen parameter is an error.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.set_trainable(true);
        self.frozen = false;
    }

    fn set_trainable(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(on);
            if !on {
                p.clear_grad();
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.ln_f_gain, &self.ln_f_bias, &self.head]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.ln_f_gain, &mut self.ln_f_bias, &mut self.head]);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.blocks.len() {
            out.extend(BLOCK_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.extend(["ln_f.gain", "ln_f.bias", "head"].map(String::from));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Order-sensitive fingerprint of every weight.
    pub fn checksum(&self) -> u64 {
        self.params()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, p| (h ^ p.checksum()).wrapping_mul(0x1000_0000_01b3))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            if p.requires_grad() {
                p.zero_grad();
            }
        }
    }

    fn check_tokens(&self, tokens: &[TokenId], start: usize) -> Result<()> {
        let max = self.config.max_seq_len;
        if start + tokens.len() > max {
            return Err(Error::Length {
                len: start + tokens.len(),
                max,
            });
        }
        self.check_range(tokens)
    }

    fn check_range(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records a forward pass over `ids`, a concatenation of sequences of
    /// `seg_len` tokens each. Positions restart at 0 in every segment.
    pub fn forward_graph<'p>(&'p self, g: &mut Graph<'p>, ids: &[TokenId], seg_len: usize) -> Result<GraphForward> {
        if seg_len == 0 || ids.len() % seg_len != 0 {
            return Err(Error::contract(format!(
                "{} ids do not split into segments of {seg_len}",
                ids.len()
            )));
        }
        if seg_len > self.config.max_seq_len {
            return Err(Error::Length {
                len: seg_len,
                max: self.config.max_seq_len,
            });
        }
        self.check_range(ids)?;
        let ids_usize: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> = (0..ids.len()).map(|i| i % seg_len).collect();
        let params: Vec<Var> = self.params().into_iter().map(|p| g.param(p)).collect();
        let (tok, pos) = (params[0], params[1]);
        let x_tok = g.embedding(tok, &ids_usize)?;
        let x_pos = g.embedding(pos, &pos_ids)?;
        let mut x = g.add(x_tok, x_pos)?;
        let heads = self.config.n_heads;
        let causal = self.is_causal();
        for l in 0..self.blocks.len() {
            let p = &params[2 + 16 * l..2 + 16 * (l + 1)];
            let h = g.layer_norm(x, p[0], p[1])?;
            let q = g.matmul(h, p[2])?;
            let q = g.add_row(q, p[3])?;
            let k = g.matmul(h, p[4])?;
            let k = g.add_row(k, p[5])?;
            let v = g.matmul(h, p[6])?;
            let v = g.add_row(v, p[7])?;
            let a = g.attention(q, k, v, seg_len, heads, causal)?;
            let o = g.matmul(a, p[8])?;
            let o = g.add_row(o, p[9])?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, p[10], p[11])?;
            let f = g.matmul(h, p[12])?;
            let f = g.add_row(f, p[13])?;
            let f = g.gelu(f);
            let f = g.matmul(f, p[14])?;
            let f = g.add_row(f, p[15])?;
            x = g.add(x, f)?;
        }
        let n = params.len();
        let hidden = g.layer_norm(x, params[n - 3], params[n - 2])?;
        Ok(GraphForward { hidden, params })
    }

    /// Graph forward followed by the output head.
    pub fn logits_graph<'p>(&'p self, g: &mut Graph<'p>, ids: &[TokenId], seg_len: usize) -> Result<(Var, GraphForward)> {
        let fwd = self.forward_graph(g, ids, seg_len)?;
        let logits = g.matmul(fwd.hidden, fwd.head())?;
        Ok((logits, fwd))
    }

    /// Adds per-parameter gradients (as returned for `fwd.params`) into the
    /// parameters' accumulators.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f32>>]) -> Result<()> {
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            if let Some(g) = g {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn run(&self, tokens: &[TokenId], start: usize, mut cache: Option<&mut KvCache>) -> Vec<f32> {
        let c = &self.config;
        let (d, n) = (c.d_model, tokens.len());
        let mut x = vec![0.0f32; n * d];
        let tok = self.tok_emb.data();
        let pos = self.pos_emb.data();
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            let p = start + i;
            for j in 0..d {
                x[i * d + j] = tok[t * d + j] + pos[p * d + j];
            }
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let (h, _, _) = kernels::layer_norm(&x, b.ln1_gain.data(), b.ln1_bias.data());
            let proj = |w: &Tensor, bias: &Tensor| {
                let mut y = kernels::matmul(&h, w.data(), n, d, d);
                kernels::add_bias_rows(&mut y, bias.data());
                y
            };
            let q = proj(&b.wq, &b.bq);
            let k = proj(&b.wk, &b.bk);
            let v = proj(&b.wv, &b.bv);
            let shape = AttnShape {
                n_q: n,
                n_kv: start + n,
                n_heads: c.n_heads,
                head_dim: c.head_dim(),
                q_offset: start,
                causal: c.is_causal(),
            };
            let att = match cache.as_deref_mut() {
                Some(cache) => {
                    let layer = &mut cache.layers[l];
                    layer.keys.extend_from_slice(&k);
                    layer.values.extend_from_slice(&v);
                    kernels::attention(&q, &layer.keys, &layer.values, shape, None)
                }
                None => kernels::attention(&q, &k, &v, shape, None),
            };
            let mut o = kernels::matmul(&att, b.wo.data(), n, d, d);
            kernels::add_bias_rows(&mut o, b.bo.data());
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += *oi;
            }
            let (h2, _, _) = kernels::layer_norm(&x, b.ln2_gain.data(), b.ln2_bias.data());
            let f = c.ffn_dim();
            let mut u = kernels::matmul(&h2, b.w_in.data(), n, d, f);
            kernels::add_bias_rows(&mut u, b.b_in.data());
            for ui in u.iter_mut() {
                *ui = kernels::gelu(*ui);
            }
            let mut o = kernels::matmul(&u, b.w_out.data(), n, f, d);
            kernels::add_bias_rows(&mut o, b.b_out.data());
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += *oi;
            }
        }
        if let Some(cache) = cache {
            cache.len += n;
        }
        kernels::layer_norm(&x, self.ln_f_gain.data(), self.ln_f_bias.data()).0
    }

    /// Final (post-norm) hidden states `[n × d]`.
    pub fn forward_hidden(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.check_tokens(tokens, 0)?;
        let h = self.run(tokens, 0, None);
        Tensor::new(vec![tokens.len(), self.config.d_model], h)
    }

    /// Pre-softmax logits `W·h` for every position, `[n × v]`.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let h = self.forward_hidden(tokens)?;
        self.logits_from_hidden(&h)
    }

    pub fn logits_from_hidden(&self, hidden: &Tensor) -> Result<Tensor> {
        crate::numerics::ops::matmul(hidden, &self.head)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers, self.config.d_model, self.config.max_seq_len)
    }

    /// Hidden states for `new_tokens`, which occupy positions
    /// `cache.len()..cache.len()+k`. Keys and values are appended to `cache`.
    pub fn forward_cached(&self, new_tokens: &[TokenId], cache: &mut KvCache) -> Result<Tensor> {
        if !self.is_causal() {
            return Err(Error::Mode("a bidirectional model cannot use a KV cache".into()));
        }
        if cache.layers.len() != self.config.n_layers || cache.d_model != self.config.d_model {
            return Err(Error::contract(format!(
                "cache built for {} layers of width {}, model has {} of width {}",
                cache.layers.len(),
                cache.d_model,
                self.config.n_layers,
                self.config.d_model
            )));
        }
        self.check_tokens(new_tokens, cache.len())?;
        let start = cache.len();
        let h = self.run(new_tokens, start, Some(cache));
        Tensor::new(vec![new_tokens.len(), self.config.d_model], h)
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self> {
        if !matches!(ckpt.kind, CheckpointKind::Ar | CheckpointKind::Mlm) {
            return Err(Error::KindMismatch {
                expected: "ar or mlm".into(),
                found: ckpt.kind.to_string(),
            });
        }
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Integrity(format!("model config in checkpoint: {e}")))?;
        config.validate()?;
        let mut model = Self::new(config, 0)?;
        ckpt.expect_kind(model.kind())?;
        let names = model.param_names();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let t = ckpt.take(name)?;
            if t.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "load checkpoint",
                    lhs: p.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.data_mut().copy_from_slice(t.data());
        }
        if let Some((extra, _)) = ckpt.tensors.first() {
            return Err(Error::Integrity(format!("unexpected tensor `{extra}`")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_checkpoint(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(checkpoint::load_checkpoint(path)?)
    }
}

impl ToCheckpoint for TransformerModel {
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(n, p)| (n, Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("same shape")))
            .collect();
        Ok(Checkpoint {
            kind: self.kind(),
            config: serde_json::to_value(&self.config)?,
            tensors,
        })
    }
}
