//! Adam with bias correction over a [`ParamSet`].

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::NumGradError;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first and second moments per trainable buffer plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamParams,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(hyper: AdamParams) -> Self {
        Self { hyper, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable buffer from its accumulated
    /// gradient, then zeroes all gradients. A non-finite gradient anywhere
    /// aborts before any value is touched, leaving parameters unchanged.
    pub fn step(&mut self, set: &mut ParamSet) -> Result<(), NumGradError> {
        for (name, buf) in set.iter() {
            if !buf.trainable {
                continue;
            }
            if let Some(index) = buf.grad.iter().position(|g| !g.is_finite()) {
                return Err(NumGradError::NonFiniteParamGrad { name: name.to_string(), index });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hyper.beta2.powi(self.t as i32);
        for (name, buf) in set.iter_mut() {
            if !buf.trainable {
                continue;
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; buf.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; buf.len()]);
            for k in 0..buf.len() {
                let g = buf.grad[k];
                m[k] = self.hyper.beta1 * m[k] + (1.0 - self.hyper.beta1) * g;
                v[k] = self.hyper.beta2 * v[k] + (1.0 - self.hyper.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                buf.values[k] -= self.hyper.lr * mhat / (vhat.sqrt() + self.hyper.eps);
            }
        }
        set.zero_grads();
        Ok(())
    }
}
