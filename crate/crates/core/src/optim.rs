//! Adaptive moment estimation over a [`ParamStore`].

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
    steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: IndexMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from `(name, gradient)` pairs. Entries without a gradient
    /// are left alone, moments included.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(String, Vec<T>)]) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::Contract(format!("gradient for `{name}` has {} values, parameter {}", g.len(), p.numel())));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                if c.lr != 0.0 {
                    let mh = *mi / bc1;
                    let vh = *vi / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
