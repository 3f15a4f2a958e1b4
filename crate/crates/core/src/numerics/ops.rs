//! Eager tensor ops for callers that do not need gradients.

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

/// Softmax over the last dimension.
pub fn softmax(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    out.set_requires_grad(false);
    let cols = out.cols().max(1);
    kernels::softmax_rows(out.data_mut(), cols);
    out
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| kernels::gelu(v)).collect(),
    )
    .expect("same shape")
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let (y, _, _) = kernels::layer_norm(x.data(), gain.data(), bias.data());
    Tensor::new(x.shape().to_vec(), y)
}

pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = dims2(table, "embedding_lookup")?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Index {
                what: "embedding id",
                index: id,
                limit: v,
            });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Result of [`cross_entropy`]; `empty` is set when every weight was zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub weight: f64,
    pub empty: bool,
}

/// Weighted mean negative log-likelihood, accumulated in f64.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], weights: &[f32]) -> Result<CrossEntropy> {
    let (n, v) = dims2(logits, "cross_entropy")?;
    if targets.len() != n || weights.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: vec![n, v],
            rhs: vec![targets.len(), weights.len()],
        });
    }
    let mut total = 0.0f64;
    let mut wsum = 0.0f64;
    for r in 0..n {
        if targets[r] >= v {
            return Err(Error::Index {
                what: "target",
                index: targets[r],
                limit: v,
            });
        }
        let w = weights[r] as f64;
        if w != 0.0 {
            total += w * nll(logits.row(r), targets[r]);
            wsum += w;
        }
    }
    if wsum == 0.0 {
        log::warn!("cross_entropy called with every weight zero; loss is 0");
        return Ok(CrossEntropy {
            loss: 0.0,
            weight: 0.0,
            empty: true,
        });
    }
    Ok(CrossEntropy {
        loss: total / wsum,
        weight: wsum,
        empty: false,
    })
}

/// `−log softmax(row)[target]` in f64.
pub fn nll(row: &[f32], target: usize) -> f64 {
    kernels::log_sum_exp(row) - row[target] as f64
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax() {
        let s = softmax(&Tensor::zeros(&[1, 4]));
        assert_eq!(s.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_no_overflow() {
        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert!((s.data()[0] as f64 - 1.0).abs() <= 1e-12);
        assert!((s.data()[1] as f64).abs() <= 1e-12);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_v() {
        let ce = cross_entropy(&Tensor::zeros(&[3, 260]), &[0, 5, 259], &[1.0; 3]).unwrap();
        assert!((ce.loss - 260f64.ln()).abs() < 1e-6);
        assert!((ce.loss - 5.5607).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0f32, 5.0, 20.0, 80.0] {
            let mut l = Tensor::zeros(&[1, 4]);
            l.data_mut()[2] = margin;
            let ce = cross_entropy(&l, &[2], &[1.0]).unwrap().loss;
            assert!(ce < last && ce >= 0.0);
            last = ce;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn all_zero_weights_flag() {
        let ce = cross_entropy(&Tensor::zeros(&[2, 4]), &[0, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(ce.empty);
    }

    #[test]
    fn target_out_of_range() {
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 4]), &[9], &[1.0]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn embedding_of_identity_is_one_hot() {
        let e = embedding_lookup(&Tensor::eye(4), &[2]).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[9.0, 1.0, 1.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
