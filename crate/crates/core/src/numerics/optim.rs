//! Adam with global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::container::Container;
use super::tensor::{Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Gradients with a larger global L2 norm are rescaled to this norm.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    /// Clips `grads` in place and applies one update to the trainable
    /// parameters. Returns the pre-clipping gradient norm.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &mut Gradients) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient contains NaN or Inf".into()));
        }
        let norm = grads.norm();
        if norm > self.config.clip_norm {
            grads.scale(self.config.clip_norm / norm);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        params.update_trainable(grads, |pi, j, value, g| {
            let mi = &mut m.get_mut(ids[pi])[j];
            let vi = &mut v.get_mut(ids[pi])[j];
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *value -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
        });
        Ok(norm)
    }

    /// Moment buffers as `adam.m.<name>` / `adam.v.<name>` entries.
    pub fn save_into(&self, params: &ParamSet, c: &mut Container) {
        c.meta.insert("adam.step".into(), self.step.to_string());
        for (id, p) in params.iter() {
            let shape = p.tensor.shape().to_vec();
            let t = |d: &[f64]| Tensor::new(shape.clone(), d.to_vec()).expect("aligned");
            c.push(format!("adam.m.{}", p.name), t(self.m.get(id)));
            c.push(format!("adam.v.{}", p.name), t(self.v.get(id)));
        }
    }

    pub fn load_from(config: AdamConfig, params: &ParamSet, c: &Container) -> Result<Self> {
        let mut adam = Self::new(config, params);
        adam.step = c
            .meta
            .get("adam.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("optimizer state missing adam.step".into()))?;
        for (id, p) in params.iter() {
            for (prefix, buf) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let key = format!("adam.{prefix}.{}", p.name);
                let t = c
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("optimizer state missing {key}")))?;
                if t.len() != p.tensor.len() {
                    return Err(Error::Format(format!("{key} has {} values", t.len())));
                }
                buf.get_mut(id).copy_from_slice(t.data());
            }
        }
        Ok(adam)
    }
}
