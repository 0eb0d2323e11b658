use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero-initialised moments shaped like every parameter in `store`.
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<T>] {
        &self.second_moment
    }

    /// Restores optimizer state (used by checkpoint loading).
    pub fn restore(&mut self, step_count: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Result<()> {
        if first.len() != self.first_moment.len() || second.len() != self.second_moment.len() {
            return Err(Error::Usage("optimizer state does not match parameter count".into()));
        }
        for (new, old) in first.iter().chain(&second).zip(self.first_moment.iter().chain(&self.second_moment)) {
            if new.shape() != old.shape() {
                return Err(Error::shape("adam restore", old.shape(), new.shape()));
            }
        }
        self.step_count = step_count;
        self.first_moment = first;
        self.second_moment = second;
        Ok(())
    }

    /// One in-place update of every parameter that requires a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first_moment.len() {
            return Err(Error::Usage("parameter store changed since optimizer creation".into()));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.requires_grad && p.grad.is_none()) {
            return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let lr = T::from_f64_lossy(c.learning_rate);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.epsilon);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.as_ref().expect("checked above");
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
