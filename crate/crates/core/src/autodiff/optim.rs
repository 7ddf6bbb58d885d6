use serde::{Deserialize, Serialize};

use super::{Array, Gradients, ParamStore};
use crate::error::{MatrError, Result};

/// AdamW hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) first: Vec<Array>,
    pub(crate) second: Vec<Array>,
    pub(crate) step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, v)| Array::zeros(v.shape()))
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Array], &[Array]) {
        (&self.first, &self.second)
    }

    /// Applies one update. Parameters are left untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(MatrError::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(MatrError::NonFiniteGradient(params.name(id).to_string()));
            }
            if g.shape() != params.get(id).shape() {
                return Err(MatrError::shape(
                    "adamw_step",
                    format!(
                        "gradient {:?} for `{}` with shape {:?}",
                        g.shape(),
                        params.name(id),
                        params.get(id).shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for (id, g) in grads.iter() {
            let p = params.get_mut(id).data_mut();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                p[i] *= decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
