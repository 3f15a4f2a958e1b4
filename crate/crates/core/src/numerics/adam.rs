use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Adam with bias correction. Moment buffers are created on the first step and
/// keyed by parameter position, so callers must pass parameters in a stable
/// order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using each parameter's accumulated gradient; a
    /// parameter without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f32) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, step received {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            if self.m[idx].len() != p.numel() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: vec![self.m[idx].len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let grad = p.grad().map(<[f32]>::to_vec);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
