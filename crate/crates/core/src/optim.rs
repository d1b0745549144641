//! SGD with momentum and a per-stage cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub base_lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 12,
            base_lr: 0.02,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks every field except `total_epochs`, which may be zero for a
    /// stage that only transforms the model.
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        cosine_lr(self.base_lr, epoch, self.total_epochs)
    }
}

/// `base · ½(1 + cos(π·e/total))`, and 0 from `total` onwards.
pub fn cosine_lr(base: f32, epoch: usize, total: usize) -> f32 {
    if epoch >= total {
        return 0.0;
    }
    let t = std::f64::consts::PI * epoch as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + t.cos())) as f32
}

/// Heavy-ball SGD: `v ← m·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    /// Applies one update to every trainable parameter and resets all
    /// gradients. Velocity buffers are created on first use.
    pub fn step(&mut self, params: &mut [Parameter], lr: f32) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value().len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if p.trainable() {
                let (w, g) = p.value_and_grad_mut();
                for ((wi, gi), vi) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
            p.zero_grad();
        }
    }
}

pub fn sgd_step(params: &mut [Parameter], sgd: &mut Sgd, cfg: &TrainConfig, epoch: usize) {
    sgd.step(params, cfg.lr_at(epoch));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseTensor;

    fn with_grad(w: f32, g: f32) -> Parameter {
        let mut p = Parameter::new(DenseTensor::scalar(w));
        p.grad_mut()[0] = g;
        p
    }

    #[test]
    fn plain_step() {
        let mut params = vec![with_grad(1.0, 2.0)];
        Sgd::new(0.0).step(&mut params, 0.1);
        assert!((params[0].value().data()[0] - 0.8).abs() < 1e-7);
        assert_eq!(params[0].grad().data(), &[0.0]);
        assert!(!params[0].has_grad());
    }

    #[test]
    fn endpoint_lr_is_zero() {
        let cfg = TrainConfig {
            total_epochs: 5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(5), 0.0);
        assert_eq!(cfg.lr_at(0), cfg.base_lr);
        let mut params = vec![with_grad(1.0, 2.0)];
        sgd_step(&mut params, &mut Sgd::new(0.9), &cfg, 5);
        assert_eq!(params[0].value().data(), &[1.0]);
    }

    #[test]
    fn two_momentum_steps_match_recurrence() {
        let (m, lr) = (0.9f32, 0.1f32);
        let mut params = vec![with_grad(1.0, 2.0)];
        let mut sgd = Sgd::new(m);
        sgd.step(&mut params, lr);
        params[0].grad_mut()[0] = -1.0;
        sgd.step(&mut params, lr);
        let v1 = 2.0f32;
        let w1 = 1.0 - lr * v1;
        let v2 = m * v1 - 1.0;
        let w2 = w1 - lr * v2;
        assert_eq!(params[0].value().data(), &[w2]);
    }

    #[test]
    fn schedule_is_positive_and_non_increasing() {
        let total = 37;
        let mut prev = f32::INFINITY;
        for e in 0..total {
            let lr = cosine_lr(0.1, e, total);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn empty_parameter_list_is_a_no_op() {
        Sgd::new(0.9).step(&mut [], 0.1);
    }
}
