use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub nesterov: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 5e-4, nesterov: true }
    }
}

/// SGD with momentum and L2 weight decay applied to every parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: ParamStore,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Result<Self> {
        if !(config.learning_rate >= 0.0 && (0.0..1.0).contains(&config.momentum) && config.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be >= 0, momentum in [0, 1)"));
        }
        Ok(Sgd { config, velocity: params.zeros_like() })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        params.check_same_shape(grads)?;
        let (mu, wd) = (self.config.momentum as f32, self.config.weight_decay as f32);
        let lr = lr as f32;
        for ((p, g), v) in params.tensors_mut().zip(grads.tensors()).zip(self.velocity.tensors_mut()) {
            for ((p, &g), v) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                let d = g + wd * *p;
                *v = mu * *v + d;
                let upd = if self.config.nesterov { d + mu * *v } else { *v };
                *p -= lr * upd;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}
