//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! the inputs it was computed from. [`Graph::backward`] walks the tape in
//! exact reverse recording order, so inputs are always visited after every
//! consumer has contributed to their gradient.
//!
//! Parameters enter the tape by reference (`Graph<'p>` borrows them for its
//! lifetime); gradients come back as a detached [`Gradients`] value so the
//! caller can release the borrow and accumulate into the parameters.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, AttnShape};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seg_len: usize,
        n_heads: usize,
        causal: bool,
        probs: Vec<f32>,
    },
    ConcatCols(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        /// per-row weight already divided by the normaliser
        scaled: Vec<f32>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    data: Cow<'p, [f32]>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward/backward; single-threaded.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    empty_loss_count: usize,
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, zeros when unused.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f32> {
        self.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; numel])
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += *b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cross-entropy ops recorded with every weight zero.
    pub fn empty_loss_count(&self) -> usize {
        self.empty_loss_count
    }

    fn push(&mut self, shape: Vec<usize>, data: Cow<'p, [f32]>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Registers a parameter by reference; it receives a gradient iff
    /// `t.requires_grad()`.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.node(v).data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("node shape is consistent")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(shape_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.grad_any(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a, b), ng))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [d] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).to_vec();
        kernels::add_bias_rows(&mut out, self.value(bias));
        let ng = self.grad_any(&[x, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.grad_any(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.grad_any(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let ng = self.grad_any(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] || d == 0 {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (y, xhat, rstd) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias));
        let ng = self.grad_any(&[x, gain, bias]);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        if cols == 0 {
            return Err(shape_err("softmax", self.shape(a), &[1]));
        }
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows(&mut out, cols);
        let ng = self.grad_any(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax(a), ng))
    }

    /// Gathers rows of `table[v×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let t = self.value(table);
            for &id in ids {
                if id >= v {
                    return Err(Error::Index {
                        what: "embedding id",
                        index: id,
                        limit: v,
                    });
                }
                out.extend_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let ng = self.grad_any(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head self-attention over `q, k, v` of shape `[B·seg_len × d]`,
    /// each segment of `seg_len` rows attending only within itself.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seg_len: usize,
        n_heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if seg_len == 0 || n % seg_len != 0 || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::contract(format!(
                "attention over {n} rows cannot split into segments of {seg_len} with {n_heads} heads of width {d}"
            )));
        }
        let ng = self.grad_any(&[q, k, v]);
        let shape = AttnShape {
            n_q: seg_len,
            n_kv: seg_len,
            n_heads,
            head_dim: d / n_heads,
            q_offset: 0,
            causal,
        };
        let seg = seg_len * d;
        let mut out = Vec::with_capacity(n * d);
        let mut probs = Vec::new();
        let mut seg_probs = Vec::new();
        for s in 0..n / seg_len {
            let r = s * seg..(s + 1) * seg;
            let o = kernels::attention(
                &self.value(q)[r.clone()],
                &self.value(k)[r.clone()],
                &self.value(v)[r],
                shape,
                ng.then_some(&mut seg_probs),
            );
            out.extend_from_slice(&o);
            if ng {
                probs.extend_from_slice(&seg_probs);
            }
        }
        Ok(self.push(
            vec![n, d],
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                seg_len,
                n_heads,
                causal,
                probs,
            },
            ng,
        ))
    }

    /// `[n×a] ‖ [n×b] → [n×(a+b)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.dims2(a, "concat_cols")?;
        let (n2, cb) = self.dims2(b, "concat_cols")?;
        if n != n2 {
            return Err(shape_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&self.value(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b)[r * cb..(r + 1) * cb]);
        }
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(vec![n, ca + cb], Cow::Owned(out), Op::ConcatCols(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).iter().sum();
        let ng = self.grad_any(&[a]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), ng)
    }

    /// Weighted mean of `−log softmax(logits)[target]` over rows; 0 when every
    /// weight is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        let total: f32 = weights.iter().sum();
        let norm = if total > 0.0 { 1.0 / total } else { 0.0 };
        self.cross_entropy_scaled(logits, targets, weights, norm)
    }

    /// `Σ_i w_i · nll_i` with no normalisation; lets callers split one batch
    /// across several graphs and still sum to the full-batch mean.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        self.cross_entropy_scaled(logits, targets, weights, 1.0)
    }

    fn cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
        norm: f32,
    ) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("cross_entropy", &[n, v], &[targets.len(), weights.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                limit: v,
            });
        }
        let scaled: Vec<f32> = weights.iter().map(|w| w * norm).collect();
        if weights.iter().all(|&w| w == 0.0) {
            self.empty_loss_count += 1;
            log::warn!("cross_entropy called with every weight zero; loss is 0");
        }
        let x = self.value(logits);
        let mut loss = 0.0f64;
        let ng = self.grad_any(&[logits]);
        let mut probs = if ng { x.to_vec() } else { Vec::new() };
        for r in 0..n {
            if scaled[r] != 0.0 {
                let row = &x[r * v..(r + 1) * v];
                let lse = kernels::log_sum_exp(row);
                loss += scaled[r] as f64 * (lse - row[targets[r]] as f64);
            }
            if ng {
                kernels::softmax_in_place(&mut probs[r * v..(r + 1) * v]);
            }
        }
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss as f32]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scaled,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<'p>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let da = kernels::matmul_nt(g, self.value(*b), m, n, k);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0f32; k * n];
                    kernels::matmul_tn_acc(self.value(*a), g, &mut db, m, k, n);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(*bias) {
                    let d = self.shape(*bias)[0];
                    let mut db = vec![0.0f32; d];
                    for row in g.chunks(d) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += *b;
                        }
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f32> = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db: Vec<f32> = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![0.0f32; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    add_into(&mut grads[gain.0], &dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0f32; d];
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    add_into(&mut grads[bias.0], &db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0f32;
                        let mut mean_dh_h = 0.0f32;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f32;
                        mean_dh_h /= d as f32;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Softmax(a) => {
                let cols = *node.shape.last().unwrap();
                let p = &node.data;
                let mut da = vec![0.0f32; g.len()];
                for r in 0..g.len() / cols {
                    let rg = &g[r * cols..(r + 1) * cols];
                    let rp = &p[r * cols..(r + 1) * cols];
                    let inner: f32 = rg.iter().zip(rp).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        da[r * cols + j] = rp[j] * (rg[j] - inner);
                    }
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = grads[table.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0f32; self.value(*table).len()]);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                grads[table.0] = Some(dt);
            }
            Op::Attention {
                q,
                k,
                v,
                seg_len,
                n_heads,
                causal,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let n = self.shape(*q)[0];
                let shape = AttnShape {
                    n_q: *seg_len,
                    n_kv: *seg_len,
                    n_heads: *n_heads,
                    head_dim: d / n_heads,
                    q_offset: 0,
                    causal: *causal,
                };
                let mut dq = vec![0.0f32; n * d];
                let mut dk = vec![0.0f32; n * d];
                let mut dv = vec![0.0f32; n * d];
                let seg = seg_len * d;
                let pseg = n_heads * seg_len * seg_len;
                for s in 0..n / seg_len {
                    let r = s * seg..(s + 1) * seg;
                    kernels::attention_backward(
                        &self.value(*q)[r.clone()],
                        &self.value(*k)[r.clone()],
                        &self.value(*v)[r.clone()],
                        &probs[s * pseg..(s + 1) * pseg],
                        &g[r.clone()],
                        shape,
                        &mut dq[r.clone()],
                        &mut dk[r.clone()],
                        &mut dv[r],
                    );
                }
                if self.wants(*q) {
                    add_into(&mut grads[q.0], &dq);
                }
                if self.wants(*k) {
                    add_into(&mut grads[k.0], &dk);
                }
                if self.wants(*v) {
                    add_into(&mut grads[v.0], &dv);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let n = self.shape(*a)[0];
                if self.wants(*a) {
                    let da: Vec<f32> = (0..n)
                        .flat_map(|r| g[r * (ca + cb)..r * (ca + cb) + ca].iter().copied())
                        .collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db: Vec<f32> = (0..n)
                        .flat_map(|r| g[r * (ca + cb) + ca..(r + 1) * (ca + cb)].iter().copied())
                        .collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                add_into(&mut grads[a.0], &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                scaled,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let mut dl = vec![0.0f32; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let w = scaled[r] * g[0];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] = w * probs[r * v + j];
                    }
                    dl[r * v + t] -= w;
                }
                add_into(&mut grads[logits.0], &dl);
            }
        }
    }
}
