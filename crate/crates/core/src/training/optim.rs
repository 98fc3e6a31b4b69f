use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::engine::{Float, ParamStore, Tensor};
use crate::model::{param_role, ParamRole};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup to `base_lr`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    /// A flat rate: no warmup, and `total_steps == usize::MAX` turns decay off.
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps: usize::MAX,
        }
    }

    /// Rate for 0-based `step`. The final step still gets a positive rate.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == usize::MAX {
            return self.base_lr;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = step - self.warmup_steps;
        self.base_lr * (span.saturating_sub(done)) as f64 / span as f64
    }
}

/// Whether weight decay touches a tensor: every weight matrix (embeddings
/// included) but no bias and no layer-norm gain.
pub fn decays(name: &str) -> bool {
    param_role(name) == ParamRole::Weight
}

/// AdamW with bias correction and decoupled decay scaled by the current
/// learning rate.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` pairs with the i-th tensor of `params`; a
    /// `None` gradient counts as zero. `step` only labels errors.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        step: usize,
    ) -> Result<(), TrainError> {
        assert_eq!(grads.len(), params.len(), "one gradient slot per tensor");
        for ((name, _), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(TrainError::NonFiniteGradient {
                        step,
                        tensor: name.to_string(),
                    });
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for (i, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if decays(name) { T::lit(lr * c.weight_decay) } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = g.as_ref().map(|g| g.data());
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta = *theta - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *theta;
            }
        }
        Ok(())
    }
}
