//! Ordered neural-network compression: global magnitude pruning, INT8
//! quantization-aware training and logit distillation, run on a small
//! deterministic reverse-mode training engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autograd`], [`ops`], [`optim`], [`nn`]: the training engine.
//! - [`pruning`], [`quant`], [`distill`]: the three compression stages.
//! - [`train`]: the shared step/epoch loop every stage dispatches to.
//! - [`pipeline`]: stage plans, checkpoints and the ordering ablation.
//! - [`metrics`]: latency harness, size accounting, ROC/PR, Pareto, reports.
//! - [`data`]: CIFAR-10 binary loader, synthetic generator, batching.

pub mod autograd;
pub mod data;
pub mod distill;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::DenseTensor;
