use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::params::ParamSet;

/// Adaptive optimizer with decoupled weight decay, cosine-annealed
/// learning rate, and global-norm gradient clipping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub cosine_t_max: usize,
    pub clip_norm: f64,
    pub accumulation_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            cosine_t_max: 50,
            clip_norm: 1.0,
            accumulation_steps: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in fields {
            if !(v > 0.0) && name != "weight_decay" {
                return Err(CoreError::Config(format!("{name}: must be positive, got {v}")));
            }
            if name == "weight_decay" && v < 0.0 {
                return Err(CoreError::Config(format!("{name}: must be >= 0, got {v}")));
            }
        }
        if self.cosine_t_max == 0 || self.accumulation_steps == 0 {
            return Err(CoreError::Config(
                "cosine_t_max and accumulation_steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// eta_t = eta_min + (eta_0 - eta_min)(1 + cos(pi t / T_max))/2, eta_min = 0.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let t = epoch.min(self.cosine_t_max) as f64;
        let tmax = self.cosine_t_max as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t / tmax).cos())
    }
}

/// One parameter update: clips the global gradient norm, applies the
/// bias-corrected adaptive step at the cosine-annealed rate, then decays
/// weights directly (not through the gradient).
pub fn optimizer_step(params: &mut ParamSet, config: &OptimizerConfig, epoch: usize) -> Result<()> {
    config.validate()?;
    let norm = params.grad_norm();
    if !norm.is_finite() {
        return Err(CoreError::Numeric("gradient norm is NaN/Inf".into()));
    }
    let scale = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    let lr = config.lr_at_epoch(epoch);
    params.step += 1;
    let t = params.step as f64;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);
    for p in params.iter_mut() {
        for k in 0..p.values.len() {
            let g = p.grad[k] * scale;
            p.moment1[k] = config.beta1 * p.moment1[k] + (1.0 - config.beta1) * g;
            p.moment2[k] = config.beta2 * p.moment2[k] + (1.0 - config.beta2) * g * g;
            let mhat = p.moment1[k] / bc1;
            let vhat = p.moment2[k] / bc2;
            p.values[k] -= lr * mhat / (vhat.sqrt() + config.epsilon);
            p.values[k] -= lr * config.weight_decay * p.values[k];
            if !p.values[k].is_finite() {
                return Err(CoreError::Numeric(format!(
                    "parameter '{}' became NaN/Inf during the update",
                    p.name
                )));
            }
        }
    }
    Ok(())
}
