//! The one training step every stage uses, and the epoch loop around it.
//!
//! A step is: taped forward (fake-quantized when a QAT state is given),
//! loss, backward, masked gradients, SGD, mask re-applied. The named
//! wrappers fix the options for each stage.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{batches, LabeledImages};
use crate::distill::{kd_loss_grad, KdConfig, TeacherRef};
use crate::error::{Error, Result};
use crate::nn::{Arch, Network};
use crate::optim::{Sgd, TrainConfig};
use crate::pruning::{apply_mask, mask_gradients, PruneMask};
use crate::quant::QatState;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    CrossEntropy,
    Distill {
        teacher: &'a TeacherRef,
        cfg: KdConfig,
    },
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f32,
}

/// One SGD step; returns the batch loss.
pub fn train_step(
    net: &mut Network,
    mask: Option<&PruneMask>,
    quant: Option<&mut QatState>,
    objective: Objective<'_>,
    x: &DenseTensor,
    labels: &[usize],
    sgd: &mut Sgd,
    lr: f32,
) -> Result<f32> {
    if let Objective::Distill { teacher, cfg } = objective {
        cfg.validate()?;
        if teacher.num_classes() != net.arch().num_classes() {
            return Err(Error::config(format!(
                "teacher has {} classes, student has {}",
                teacher.num_classes(),
                net.arch().num_classes()
            )));
        }
    }
    let mut tape = Tape::new();
    let logits = net.forward_tape(&mut tape, x, quant)?;
    let (loss, value) = match objective {
        Objective::CrossEntropy => {
            let id = tape.cross_entropy(logits, labels)?;
            (id, tape.value(id).data()[0])
        }
        Objective::Distill { teacher, cfg } => {
            let zt = teacher.logits(x)?;
            let (v, g) = kd_loss_grad(tape.value(logits), &zt, labels, &cfg)?;
            (tape.loss(logits, v, g)?, v)
        }
    };
    tape.backward(loss, net.params_mut())?;
    if let Some(m) = mask {
        mask_gradients(net.params_mut(), m)?;
    }
    sgd.step(net.params_mut(), lr);
    if let Some(m) = mask {
        apply_mask(&mut net.weights_mut(), m)?;
    }
    Ok(value)
}

pub fn masked_train_step(
    net: &mut Network,
    mask: &PruneMask,
    x: &DenseTensor,
    labels: &[usize],
    sgd: &mut Sgd,
    lr: f32,
) -> Result<f32> {
    train_step(
        net,
        Some(mask),
        None,
        Objective::CrossEntropy,
        x,
        labels,
        sgd,
        lr,
    )
}

pub fn qat_train_step(
    net: &mut Network,
    mask: &PruneMask,
    quant: &mut QatState,
    x: &DenseTensor,
    labels: &[usize],
    sgd: &mut Sgd,
    lr: f32,
) -> Result<f32> {
    train_step(
        net,
        Some(mask),
        Some(quant),
        Objective::CrossEntropy,
        x,
        labels,
        sgd,
        lr,
    )
}

/// A distillation step. `quant` is `None` when distilling before QAT.
#[allow(clippy::too_many_arguments)]
pub fn kd_train_step(
    net: &mut Network,
    mask: &PruneMask,
    quant: Option<&mut QatState>,
    teacher: &TeacherRef,
    cfg: KdConfig,
    x: &DenseTensor,
    labels: &[usize],
    sgd: &mut Sgd,
    lr: f32,
) -> Result<f32> {
    train_step(
        net,
        Some(mask),
        quant,
        Objective::Distill { teacher, cfg },
        x,
        labels,
        sgd,
        lr,
    )
}

/// Runs `cfg.total_epochs` epochs with a cosine schedule over those epochs.
/// Epoch `e` draws its batch order from data epoch `epoch_offset + e`, so
/// consecutive stages never replay an order. The batch size is capped at
/// the dataset size.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    net: &mut Network,
    mask: Option<&PruneMask>,
    mut quant: Option<&mut QatState>,
    objective: Objective<'_>,
    data: &LabeledImages,
    cfg: &TrainConfig,
    epoch_offset: u64,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.momentum);
    let bs = cfg.batch_size.min(data.len());
    let mut stats = Vec::with_capacity(cfg.total_epochs);
    for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for b in batches(data, bs, cfg.seed, epoch_offset + epoch as u64)? {
            let loss = train_step(
                net,
                mask,
                quant.as_deref_mut(),
                objective,
                &b.x,
                &b.labels,
                &mut sgd,
                lr,
            )?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite loss in epoch {epoch}"
                )));
            }
            total += loss as f64 * b.labels.len() as f64;
            count += b.labels.len();
        }
        stats.push(EpochStats {
            epoch,
            lr,
            loss: (total / count as f64) as f32,
        });
    }
    Ok(stats)
}

/// A freshly initialized FP32 network trained with cross-entropy.
pub fn train_baseline(
    arch: Arch,
    data: &LabeledImages,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochStats>)> {
    let mut net = Network::new(arch, cfg.seed)?;
    let stats = train_epochs(&mut net, None, None, Objective::CrossEntropy, data, cfg, 0)?;
    Ok((net, stats))
}
