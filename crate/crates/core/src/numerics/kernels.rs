//! Slice-level f32 kernels shared by the autodiff graph and the cache-aware
//! inference path.
//!
//! Every kernel computes each output row with an accumulation order that does
//! not depend on how many other rows are in the call. A row produced by an
//! incremental (KV-cached) forward is therefore bit-identical to the same row
//! produced by a full-sequence forward.

/// Fixed-order dot product with eight independent partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    matmul_into(a, b, &mut c, m, k, n);
    c
}

/// Accumulating form: `c += a · b`. Rows are processed four at a time so each
/// row of `b` is loaded once per block; per-element summation order is still
/// `p = 0..k`.
pub fn matmul_into(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bj = brow[j];
                c0[j] += x0 * bj;
                c1[j] += x1 * bj;
                c2[j] += x2 * bj;
                c3[j] += x3 * bj;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for p in 0..k {
            axpy(crow, arow[p], &b[p * n..(p + 1) * n]);
        }
        i += 1;
    }
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[m×n] = a[m×k] · bᵀ` where `b` is stored `[n×k]`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `out[k×n] += aᵀ · c` where `a` is `[m×k]` and `c` is `[m×n]`.
pub fn matmul_tn_acc(a: &[f32], c: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    matmul_into(&at, c, out, k, m, n);
}

pub fn add_bias_rows(x: &mut [f32], bias: &[f32]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Row-wise layer norm. Returns `(y, xhat, rstd)`.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut rstd = vec![0.0f32; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// In-place softmax over each row of width `cols`, max-subtracted.
pub fn softmax_rows(x: &mut [f32], cols: usize) {
    for row in x.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

#[inline]
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `log Σ exp(row)` computed in f64 for the loss path.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}

/// Geometry of one multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    /// query rows in this call
    pub n_q: usize,
    /// key/value rows visible to this call
    pub n_kv: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// absolute position of query row 0 within the key sequence
    pub q_offset: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    #[inline]
    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (self.q_offset + i + 1).min(self.n_kv)
        } else {
            self.n_kv
        }
    }
}

/// Scaled dot-product attention over row-major `[rows × n_heads·head_dim]`
/// buffers. When `probs` is given it receives `[n_heads × n_q × n_kv]`
/// attention weights (zero past the causal frontier).
pub fn attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    s: AttnShape,
    mut probs: Option<&mut Vec<f32>>,
) -> Vec<f32> {
    let w = s.width();
    let hd = s.head_dim;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; s.n_q * w];
    if let Some(p) = probs.as_deref_mut() {
        p.clear();
        p.resize(s.n_heads * s.n_q * s.n_kv, 0.0);
    }
    let mut scores = vec![0.0f32; s.n_kv];
    for h in 0..s.n_heads {
        let off = h * hd;
        for i in 0..s.n_q {
            let lim = s.visible(i);
            let qi = &q[i * w + off..i * w + off + hd];
            for j in 0..lim {
                scores[j] = dot(qi, &k[j * w + off..j * w + off + hd]) * scale;
            }
            softmax_in_place(&mut scores[..lim]);
            let orow = &mut out[i * w + off..i * w + off + hd];
            for j in 0..lim {
                axpy(orow, scores[j], &v[j * w + off..j * w + off + hd]);
            }
            if let Some(p) = probs.as_deref_mut() {
                let base = (h * s.n_q + i) * s.n_kv;
                p[base..base + lim].copy_from_slice(&scores[..lim]);
            }
        }
    }
    out
}

/// Backward of [`attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    s: AttnShape,
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let w = s.width();
    let hd = s.head_dim;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dp = vec![0.0f32; s.n_kv];
    for h in 0..s.n_heads {
        let off = h * hd;
        for i in 0..s.n_q {
            let lim = s.visible(i);
            let base = (h * s.n_q + i) * s.n_kv;
            let p = &probs[base..base + lim];
            let doi = &dout[i * w + off..i * w + off + hd];
            let mut weighted = 0.0f32;
            for j in 0..lim {
                let vj = &v[j * w + off..j * w + off + hd];
                dp[j] = dot(doi, vj);
                weighted += p[j] * dp[j];
                axpy(&mut dv[j * w + off..j * w + off + hd], p[j], doi);
            }
            let qi_start = i * w + off;
            for j in 0..lim {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = j * w + off;
                for t in 0..hd {
                    dq[qi_start + t] += ds * k[kj + t];
                    dk[kj + t] += ds * q[qi_start + t];
                }
            }
        }
    }
}
