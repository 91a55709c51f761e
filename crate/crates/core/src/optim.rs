//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Mat;

/// `base_lr · ½ (1 + cos(π · step / total_steps))`, reaching 0 at the end.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.05,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Mat,
    pub v: Mat,
    /// Updates applied to this parameter; drives bias correction.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Indexed like the parameter store; `None` until a parameter first
    /// receives a gradient.
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self {
            config,
            moments: vec![None; store.len()],
        }
    }

    /// One update with learning rate `lr`. `grads` is indexed like the store;
    /// parameters without a gradient are left untouched, including weight
    /// decay. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.moments.len() != store.len() {
            return Err(Error::shape("gradient list does not match the parameter store"));
        }
        for (id, param) in store.iter() {
            if let Some(g) = &grads[id.index()] {
                if g.dim() != param.value.dim() {
                    return Err(Error::shape(format!("gradient shape mismatch for {}", param.name)));
                }
                if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "gradient".into(),
                        detail: format!("parameter {} has gradient entry {bad}", param.name),
                    });
                }
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let mom = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
                steps: 0,
            });
            mom.steps += 1;
            let bc1 = 1.0 - beta1.powi(mom.steps as i32);
            let bc2 = 1.0 - beta2.powi(mom.steps as i32);
            ndarray::Zip::from(&mut param.value)
                .and(&mut mom.m)
                .and(&mut mom.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p -= lr * weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}
