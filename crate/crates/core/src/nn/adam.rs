use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment pair per stored tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Fails unless a
    /// backward pass has been absorbed since the previous step.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !store.has_pending_grads() {
            return Err(Error::Contract("adam step without a preceding backward pass".into()));
        }
        if self.first.is_empty() {
            for id in store.ids() {
                let n = store.get(id).numel();
                self.first.push(vec![T::zero(); n]);
                self.second.push(vec![T::zero(); n]);
            }
        }
        if self.first.len() != store.len() {
            return Err(Error::Contract("parameter store changed under the optimizer".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (((p, g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * *g;
                *vi = b2 * *vi + ob2 * *g * *g;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.clear_pending();
        Ok(())
    }
}
