//! AdamW with linear warmup and linear decay to zero.
//!
//! Weight decay is decoupled from the gradient step and applied only to
//! matrices (parameters with two or more axes); vectors such as biases and
//! layer-norm gains are not decayed. Each parameter's learning-rate
//! multiplier scales both its step and its decay.

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::param::ParamStore;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Multiplier on the base learning rate: ramps up over `warmup` steps, then
/// falls linearly to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    /// Warmup over the first `fraction` of `total` steps.
    pub fn with_warmup_fraction(total: usize, fraction: f64) -> Self {
        Self {
            warmup: ((total as f64) * fraction).round() as usize,
            total,
        }
    }

    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else if self.total > self.warmup {
            ((self.total - step.min(self.total)) as f64 / (self.total - self.warmup) as f64).max(0.0)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update with learning rate `lr` (already scheduled). Parameters
    /// without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, precision: Precision) {
        self.t += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.t);
        let bias2 = 1.0 - c.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            let rate = lr * p.lr_mult;
            let decay = if p.value.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                *theta -= rate * (mhat / (vhat.sqrt() + c.eps) + decay * *theta);
                *theta = precision.round(*theta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::with_warmup_fraction(100, 0.1);
        assert_eq!(s.warmup, 10);
        assert!((s.factor(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.factor(9), 1.0);
        assert_eq!(s.factor(10), 1.0);
        assert!((s.factor(55) - 0.5).abs() < 1e-15);
        assert_eq!(s.factor(100), 0.0);
        assert_eq!(Schedule { warmup: 0, total: 0 }.factor(3), 1.0);
    }
}
