//! Temperature-scaled logit distillation.
//!
//! `L = α·CE(z_s, y) + (1 − α)·T²·KL(softmax(z_t/T) ‖ softmax(z_s/T))`,
//! with the KL term averaged over the batch. Gradients flow to `z_s` only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Classifier, Network};
use crate::ops::cross_entropy;
use crate::tensor::{log_softmax_f64, softmax_f64, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f32,
    pub temperature: f32,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 4.0,
        }
    }
}

impl KdConfig {
    pub fn new(alpha: f32, temperature: f32) -> Result<Self> {
        let cfg = Self { alpha, temperature };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The frozen FP32 teacher. It is only ever evaluated, never taped.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRef {
    net: Network,
}

impl TeacherRef {
    pub fn new(net: Network) -> Self {
        Self { net }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.net.forward(x)
    }

    pub fn num_classes(&self) -> usize {
        self.net.arch().num_classes()
    }
}

fn check_pair(zs: &DenseTensor, zt: &DenseTensor) -> Result<(usize, usize)> {
    if zs.shape() != zt.shape() || zs.shape().len() != 2 {
        return Err(Error::shape(
            "kd_loss",
            format!(
                "student logits {:?} vs teacher logits {:?}",
                zs.shape(),
                zt.shape()
            ),
        ));
    }
    Ok((zs.shape()[0], zs.shape()[1]))
}

/// Batch-mean `KL(softmax(z_t/T) ‖ softmax(z_s/T))`, clamped at zero.
pub fn kl_term(zs: &DenseTensor, zt: &DenseTensor, temperature: f32) -> Result<f64> {
    let (batch, _) = check_pair(zs, zt)?;
    let t = temperature as f64;
    let mut total = 0.0;
    for r in 0..batch {
        let lt = log_softmax_f64(zt.row(r), t);
        let ls = log_softmax_f64(zs.row(r), t);
        let kl: f64 = lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
    }
    Ok(total / batch as f64)
}

/// Loss value and its gradient with respect to the student logits.
pub fn kd_loss_grad(
    zs: &DenseTensor,
    zt: &DenseTensor,
    labels: &[usize],
    cfg: &KdConfig,
) -> Result<(f32, Vec<f32>)> {
    cfg.validate()?;
    let (batch, classes) = check_pair(zs, zt)?;
    let (alpha, t) = (cfg.alpha as f64, cfg.temperature as f64);
    let (ce, ce_grad) = cross_entropy(zs.data(), classes, labels)?;
    let kl = kl_term(zs, zt, cfg.temperature)?;
    let loss = alpha * ce as f64 + (1.0 - alpha) * t * t * kl;
    let mut grad = vec![0.0f32; zs.len()];
    // d(T²·KL)/dz_s = T·(p_s − p_t)
    let scale = (1.0 - alpha) * t / batch as f64;
    for r in 0..batch {
        let ps = softmax_f64(zs.row(r), t);
        let pt = softmax_f64(zt.row(r), t);
        for k in 0..classes {
            let i = r * classes + k;
            grad[i] = (alpha * ce_grad[i] as f64 + scale * (ps[k] - pt[k])) as f32;
        }
    }
    Ok((loss as f32, grad))
}

pub fn kd_loss(
    zs: &DenseTensor,
    zt: &DenseTensor,
    labels: &[usize],
    cfg: &KdConfig,
) -> Result<f32> {
    Ok(kd_loss_grad(zs, zt, labels, cfg)?.0)
}

/// Mean per-sample L2 distance between the logits of two models.
pub fn function_shift(
    a: &dyn Classifier,
    b: &dyn Classifier,
    probes: &[DenseTensor],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for x in probes {
        let za = a.logits(x)?;
        let zb = b.logits(x)?;
        if za.shape() != zb.shape() {
            return Err(Error::shape(
                "function_shift",
                format!("{:?} vs {:?}", za.shape(), zb.shape()),
            ));
        }
        let (rows, _) = za.rows_cols();
        for r in 0..rows {
            let d: f64 = za
                .row(r)
                .iter()
                .zip(zb.row(r))
                .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
                .sum();
            total += d.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}
