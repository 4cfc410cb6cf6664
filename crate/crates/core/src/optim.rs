//! AdamW with a per-epoch cosine learning-rate schedule.

use std::f64::consts::PI;

use indexmap::IndexMap;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::encoder::ParamMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Floor of the cosine schedule as a fraction of the base rate.
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_lr_ratio: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("min_lr_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Rate used throughout `epoch` of a `total`-epoch run.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let t = if total <= 1 { 0.0 } else { epoch as f64 / (total - 1) as f64 };
        let floor = self.learning_rate * self.min_lr_ratio;
        floor + (self.learning_rate - floor) * 0.5 * (1.0 + (PI * t.min(1.0)).cos())
    }
}

/// Decay applies to weight matrices only, not to biases, norms or tokens.
fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !name.contains("norm")
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Array2<T>,
    v: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Names of tensors that hold moment estimates.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Applies one update to every tensor named in `grads`. Each name must
    /// exist in one of `targets`.
    pub fn step(&mut self, targets: &mut [&mut ParamMap<T>], grads: &[(String, Array2<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::c(lr);
        let eps = T::c(c.eps);
        let wd = T::c(c.weight_decay);
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (name, g) in grads {
            let param = targets
                .iter_mut()
                .find_map(|t| t.get_mut(name))
                .ok_or_else(|| Error::Integrity(format!("optimizer target {name} not found")))?;
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
            });
            let decay = if decays(name) { wd } else { T::zero() };
            Zip::from(param)
                .and(&mut mo.m)
                .and(&mut mo.v)
                .and(g)
                .for_each(|p, m, v, &gr| {
                    *m = b1 * *m + one_b1 * gr;
                    *v = b2 * *v + one_b2 * gr * gr;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p = *p - lr_t * (update + decay * *p);
                });
        }
        Ok(())
    }
}
