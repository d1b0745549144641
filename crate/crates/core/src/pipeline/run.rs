//! Stage execution over a model state, and whole-plan runs.
//!
//! Between stages the model always passes through its checkpoint form, so
//! what a stage hands on is exactly what would be deployed: once quantized,
//! the next stage starts from the dequantized integer weights and the
//! learned activation grids.

use crate::data::{eval_batches, LabeledImages, Split};
use crate::distill::TeacherRef;
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_accuracy, measure_latency, rel_bops, Baseline, BenchConfig, LatencyReport,
    TradeoffRecord,
};
use crate::nn::{Classifier, Network};
use crate::optim::TrainConfig;
use crate::pruning::{apply_mask, prune_global, PruneMask};
use crate::quant::{convert_to_int8, IntNetwork, QatState};
use crate::tensor::DenseTensor;
use crate::train::{train_epochs, EpochStats, Objective};

use super::checkpoint::{count_nonzero, Checkpoint, HistoryEntry, MetricsSnapshot, Payload};
use super::plan::{Stage, StageConfig, StagePlan, StageTraining};

/// A deployable model: FP32 or integer-only.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Float(Network),
    Int8(IntNetwork),
}

impl Classifier for Model {
    fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
        match self {
            Model::Float(n) => n.logits(x),
            Model::Int8(q) => q.logits(x),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Model::Float(n) => n.num_classes(),
            Model::Int8(q) => q.num_classes(),
        }
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Ok(match &self.payload {
            Payload::Float(v) => Model::Float(Network::from_values(self.arch, v.clone())?),
            Payload::Int8(q) => Model::Int8(q.clone()),
        })
    }
}

/// What stages read and write.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub net: Network,
    pub mask: Option<PruneMask>,
    /// Present once quantization-aware training has run.
    pub quant: Option<QatState>,
    pub history: Vec<HistoryEntry>,
}

impl ModelState {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (net, quant) = match &ckpt.payload {
            Payload::Float(v) => (Network::from_values(ckpt.arch, v.clone())?, None),
            Payload::Int8(q) => (
                q.to_float()?,
                Some(QatState::seeded(q.input_qparams(), &q.activation_qparams())),
            ),
        };
        Ok(Self {
            net,
            mask: ckpt.mask.clone(),
            quant,
            history: ckpt.history.clone(),
        })
    }

    /// The deployable form, evaluated on `test` for the metrics snapshot.
    pub fn to_checkpoint(&self, test: &LabeledImages) -> Result<Checkpoint> {
        let payload = match &self.quant {
            Some(q) => Payload::Int8(convert_to_int8(&self.net, &q.activation_qparams()?)?),
            None => Payload::Float(
                self.net
                    .params()
                    .iter()
                    .map(|p| p.value().clone())
                    .collect(),
            ),
        };
        let mut ckpt = Checkpoint {
            arch: self.net.arch(),
            mask: self.mask.clone(),
            payload,
            history: self.history.clone(),
            metrics: MetricsSnapshot {
                accuracy_pct: 0.0,
                nonzeros: 0,
            },
        };
        ckpt.metrics = MetricsSnapshot {
            accuracy_pct: evaluate_accuracy(&ckpt.model()?, test)?,
            nonzeros: count_nonzero(&ckpt),
        };
        Ok(ckpt)
    }

    /// Training epochs already spent on this model, baseline included.
    pub fn epochs_so_far(&self) -> u64 {
        self.history.iter().map(|h| h.losses.len() as u64).sum()
    }
}

pub struct StageContext<'a> {
    pub data: &'a Split,
    pub teacher: Option<&'a TeacherRef>,
    pub training: StageTraining,
    pub seed: u64,
}

/// Every pruned coordinate is exactly zero, and no more weights are active
/// than the mask allows.
fn check_mask(net: &Network, mask: &PruneMask) -> Result<()> {
    for (site, (w, bits)) in net.weights().iter().zip(mask.layers()).enumerate() {
        if let Some(i) = w
            .data()
            .iter()
            .zip(bits.iter())
            .position(|(v, keep)| !keep && *v != 0.0)
        {
            return Err(Error::Invariant(format!(
                "pruned weight {i} of site {site} is nonzero"
            )));
        }
    }
    let active = crate::pruning::count_nonzero(&net.weights());
    if active > mask.max_active() {
        return Err(Error::Invariant(format!(
            "{active} active weights exceed the {} allowed",
            mask.max_active()
        )));
    }
    Ok(())
}

/// Runs one stage and returns the new state with its checkpoint.
pub fn run_stage(
    mut state: ModelState,
    stage: &Stage,
    ctx: &StageContext<'_>,
) -> Result<(ModelState, Checkpoint)> {
    stage.validate()?;
    let cfg = TrainConfig {
        total_epochs: stage.epochs,
        base_lr: ctx.training.base_lr,
        momentum: ctx.training.momentum,
        batch_size: ctx.training.batch_size,
        seed: ctx.seed,
    };
    let offset = state.epochs_so_far();
    let train = &ctx.data.train;
    let stats: Vec<EpochStats> = match stage.config {
        StageConfig::Prune { rho } => {
            if state.mask.is_some() {
                return Err(Error::config("the model is already pruned"));
            }
            let mask = prune_global(&state.net.weights(), rho)?;
            apply_mask(&mut state.net.weights_mut(), &mask)?;
            let stats = train_epochs(
                &mut state.net,
                Some(&mask),
                state.quant.as_mut(),
                Objective::CrossEntropy,
                train,
                &cfg,
                offset,
            )?;
            state.mask = Some(mask);
            stats
        }
        StageConfig::Qat => {
            if state.quant.is_some() {
                return Err(Error::config("the model is already converted to INT8"));
            }
            let mut q = QatState::new(state.net.num_sites());
            let stats = if stage.epochs == 0 {
                let xs: Vec<DenseTensor> = eval_batches(train, cfg.batch_size)?
                    .into_iter()
                    .map(|b| b.x)
                    .collect();
                state.net.observe_activations(&xs, &mut q)?;
                Vec::new()
            } else {
                train_epochs(
                    &mut state.net,
                    state.mask.as_ref(),
                    Some(&mut q),
                    Objective::CrossEntropy,
                    train,
                    &cfg,
                    offset,
                )?
            };
            state.quant = Some(q);
            stats
        }
        StageConfig::Kd(kd) => {
            let teacher = ctx
                .teacher
                .ok_or_else(|| Error::config("a distillation stage needs a teacher checkpoint"))?;
            train_epochs(
                &mut state.net,
                state.mask.as_ref(),
                state.quant.as_mut(),
                Objective::Distill { teacher, cfg: kd },
                train,
                &cfg,
                offset,
            )?
        }
    };
    if let Some(m) = &state.mask {
        check_mask(&state.net, m)?;
    }
    state.history.push(HistoryEntry {
        label: stage.to_string(),
        losses: stats.iter().map(|s| s.loss).collect(),
        accuracy_pct: 0.0,
    });
    let mut ckpt = state.to_checkpoint(&ctx.data.test)?;
    ckpt.history.last_mut().expect("just pushed").accuracy_pct = ckpt.metrics.accuracy_pct;
    let next = ModelState::from_checkpoint(&ckpt)?;
    if let Some(m) = &next.mask {
        check_mask(&next.net, m)?;
    }
    Ok((next, ckpt))
}

/// Latency settings of a run: the harness configuration and how many test
/// images form the timed batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub config: BenchConfig,
    pub batch: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            config: BenchConfig::default(),
            batch: 32,
        }
    }
}

/// The first `n` test images as one batch.
pub fn bench_input(data: &LabeledImages, n: usize) -> Result<DenseTensor> {
    let n = n.clamp(1, data.len());
    Ok(eval_batches(data, n)?.swap_remove(0).x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSnapshot {
    pub stage: Stage,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub checkpoint: Checkpoint,
    pub bytes: Vec<u8>,
    pub record: TradeoffRecord,
    pub baseline_latency: LatencyReport,
    pub stages: Vec<StageSnapshot>,
    /// `Some(true)` when a latency budget was set and missed.
    pub budget_exceeded: Option<bool>,
}

pub fn measure_checkpoint(
    ckpt: &Checkpoint,
    x: &DenseTensor,
    bench: &BenchConfig,
) -> Result<LatencyReport> {
    measure_latency(&ckpt.model()?, x, bench)
}

/// The table row of a checkpoint of `size_bytes` serialized bytes. Both
/// operands count as 8-bit once quantized, 32-bit otherwise.
pub fn tradeoff_record(
    method: String,
    ckpt: &Checkpoint,
    size_bytes: u64,
    latency: LatencyReport,
    reference: Baseline,
) -> Result<TradeoffRecord> {
    let bits = if ckpt.is_quantized() { 8 } else { 32 };
    let sparsity = ckpt.mask.as_ref().map_or(0.0, PruneMask::achieved_sparsity);
    TradeoffRecord::new(
        method,
        ckpt.metrics.accuracy_pct,
        count_nonzero(ckpt),
        size_bytes,
        latency,
        reference,
        rel_bops(bits, bits, sparsity, 32),
    )
}

/// `plan` over `baseline`, which also serves as the distillation teacher.
pub fn run_pipeline(
    plan: &StagePlan,
    baseline: &Checkpoint,
    data: &Split,
    bench: &BenchSettings,
) -> Result<PipelineRun> {
    plan.validate()?;
    let teacher = TeacherRef::new(baseline.float_network()?);
    let ctx = StageContext {
        data,
        teacher: Some(&teacher),
        training: plan.training,
        seed: plan.seed,
    };
    let mut state = ModelState::from_checkpoint(baseline)?;
    let mut ckpt = baseline.clone();
    let mut stages = Vec::with_capacity(plan.stages.len());
    for stage in &plan.stages {
        let (next, c) = run_stage(state, stage, &ctx)?;
        state = next;
        ckpt = c;
        stages.push(StageSnapshot {
            stage: *stage,
            checkpoint: ckpt.clone(),
        });
    }
    let bytes = ckpt.encode()?;
    let x = bench_input(&data.test, bench.batch)?;
    let baseline_latency = measure_checkpoint(baseline, &x, &bench.config)?;
    let latency = measure_checkpoint(&ckpt, &x, &bench.config)?;
    let budget_exceeded = plan.latency_budget_ms.map(|t| latency.mean_ms > t);
    let reference = Baseline {
        size_bytes: baseline.encode()?.len() as u64,
        latency_ms: baseline_latency.mean_ms,
    };
    let record = tradeoff_record(plan.label(), &ckpt, bytes.len() as u64, latency, reference)?;
    Ok(PipelineRun {
        checkpoint: ckpt,
        bytes,
        record,
        baseline_latency,
        stages,
        budget_exceeded,
    })
}

/// Packages a trained FP32 network as a baseline checkpoint.
pub fn baseline_checkpoint(
    net: &Network,
    stats: &[EpochStats],
    test: &LabeledImages,
) -> Result<Checkpoint> {
    let state = ModelState {
        net: net.clone(),
        mask: None,
        quant: None,
        history: vec![HistoryEntry {
            label: format!("baseline:{}", net.arch().name()),
            losses: stats.iter().map(|s| s.loss).collect(),
            accuracy_pct: 0.0,
        }],
    };
    let mut ckpt = state.to_checkpoint(test)?;
    ckpt.history[0].accuracy_pct = ckpt.metrics.accuracy_pct;
    Ok(ckpt)
}
