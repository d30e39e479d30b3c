//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let first = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let second = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        OptimizerState {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over every trainable parameter. Gradients are read,
    /// not cleared.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::UninitializedGradient(p.name.clone()));
        }
        self.step_available(store);
        Ok(())
    }

    /// Like [`step`](Self::step), but parameters without a gradient are left
    /// alone (their moments are not advanced either).
    pub fn step_available(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let grad = match (&p.grad, p.trainable) {
                (Some(g), true) => g,
                _ => continue,
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if weight_decay != 0.0 {
                    *w -= lr * weight_decay * *w;
                }
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm over all trainable gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|p| p.trainable)
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total = grad_norm(store);
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for p in store.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    total
}
