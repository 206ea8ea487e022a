//! Rectified Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RadamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RadamConfig {
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Length of the approximated simple moving average at step `t`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification term, or `None` while `rho_t <= 4`.
    pub fn rectifier(&self, t: u64) -> Option<f64> {
        let (ri, rt) = (self.rho_inf(), self.rho(t));
        (rt > 4.0).then(|| (((rt - 4.0) * (rt - 2.0) * ri) / ((ri - 4.0) * (ri - 2.0) * rt)).sqrt())
    }
}

/// Moments and step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Radam {
    pub cfg: RadamConfig,
    pub slots: BTreeMap<String, Slot>,
}

impl Radam {
    pub fn new(cfg: RadamConfig) -> Self {
        Self {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.slots.clear();
    }

    /// One update of every parameter that has a gradient, with learning
    /// rate `lr(name)`. Fails without touching anything if a gradient is
    /// non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &ParamStore<f32>,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "radam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let c = self.cfg.clone();
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: Tensor::zeros(g.shape().to_vec()),
                v: Tensor::zeros(g.shape().to_vec()),
                t: 0,
            });
            slot.t += 1;
            let t = slot.t;
            let bc1 = 1.0 - c.beta1.powi(t as i32);
            let bc2 = 1.0 - c.beta2.powi(t as i32);
            let rect = c.rectifier(t);
            let step = lr(name);
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (i, (&gi, pi)) in g.data().iter().zip(p.data_mut()).enumerate() {
                let gi = f64::from(gi);
                let mi = c.beta1 * f64::from(m[i]) + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * f64::from(v[i]) + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let delta = match rect {
                    Some(r) => r * m_hat / ((vi / bc2).sqrt() + c.eps),
                    None => m_hat,
                };
                *pi = (f64::from(*pi) - step * delta) as f32;
            }
        }
        Ok(())
    }
}
