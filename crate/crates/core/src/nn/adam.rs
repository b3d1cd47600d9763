use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate decayed linearly from `start` (first step) to `end`
/// (last step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

/// Moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::ZERO; n], vec![T::ZERO; n])).unzip();
        AdamState { config, step: 0, m, v }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), (params.len(), grads.len())));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - libm::pow(beta1, t as f64));
        let c2 = 1.0 / (1.0 - libm::pow(beta2, t as f64));
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (lr_c1, c2, eps) = (T::from_f64(lr * c1), T::from_f64(c2), T::from_f64(eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape(m.len(), (p.len(), g.len())));
            }
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= lr_c1 * *m / ((*v * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
