use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Current learning rate; starts at `config.lr` and is driven by a schedule.
    pub lr: f64,
    step: u64,
    first: IndexMap<String, Vec<T>>,
    second: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            lr: config.lr,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every trainable tensor from its gradient slot; slots are cleared.
    pub fn step(&mut self, params: &mut ModelParams<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(TensorError::Contract(format!("missing gradient for {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let lr = T::of(self.lr);
        let decay = T::of(self.lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (name, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let g = t.take_grad().expect("checked above");
            let n = g.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n {
                return Err(TensorError::Contract(format!("moment shape mismatch for {name}")));
            }
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p - decay * *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `lr = base * gamma^(epoch / step_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub base: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepLr {
    pub fn new(base: f64) -> Self {
        Self {
            base,
            step_size: 15,
            gamma: 0.1,
        }
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base * self.gamma.powi((epoch / self.step_size.max(1)) as i32)
    }
}
