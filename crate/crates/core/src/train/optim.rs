use serde::{Deserialize, Serialize};

use crate::error::{CrispError, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.875;
pub const DEFAULT_WEIGHT_DECAY: f64 = 3.05e-5;

/// `base * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl SgdConfig {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            total_steps,
        }
    }
}

/// SGD with heavy-ball momentum, coupled weight decay and a cosine schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub config: SgdConfig,
    velocity: Vec<f64>,
    step: usize,
}

impl SgdMomentum {
    pub fn new(config: SgdConfig, n_params: usize) -> Self {
        Self {
            config,
            velocity: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.base_lr, self.step, self.config.total_steps)
    }

    /// `v <- mu v + g + wd p` (no decay where `decay_mask` is false),
    /// then `p <- p - lr(t) v`. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay_mask: &[bool]) -> Result<f64> {
        let n = self.velocity.len();
        if params.len() != n || grads.len() != n || decay_mask.len() != n {
            return Err(CrispError::ShapeMismatch(format!(
                "optimizer holds {n} parameters; got params {}, grads {}, mask {}",
                params.len(),
                grads.len(),
                decay_mask.len()
            )));
        }
        if self.step >= self.config.total_steps {
            return Err(CrispError::ScheduleExhausted {
                step: self.step,
                total: self.config.total_steps,
            });
        }
        let lr = self.current_lr();
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        for i in 0..n {
            let decay = if decay_mask[i] { weight_decay * params[i] } else { 0.0 };
            self.velocity[i] = momentum * self.velocity[i] + grads[i] + decay;
            params[i] -= lr * self.velocity[i];
        }
        self.step += 1;
        Ok(lr)
    }
}
