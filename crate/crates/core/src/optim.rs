//! Adam with decoupled weight decay, and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment buffers, one pair per parameter tensor, created on the first step.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Weight decay only touches tensors of rank ≥ 2 (weight
    /// matrices and embedding tables); biases and norm gains are left alone.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient {} in {name} at flat index {i} (step {})",
                    g.data()[i],
                    self.t + 1
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, (_, p))| m.len() != p.numel()) {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
            let decay = if p.rank() >= 2 { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `base/warmup` to `base`, then cosine decay to zero at
/// `total` steps (or constant when `cosine` is off).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub cosine: bool,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine || self.total <= self.warmup {
            return self.base;
        }
        let progress = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
