//! Accuracy, relative bit-operations and the per-model tradeoff record.

use serde::{Deserialize, Serialize};

use super::latency::LatencyReport;
use crate::data::{eval_batches, LabeledImages};
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::tensor::{argmax, softmax_rows, DenseTensor};

const EVAL_BATCH: usize = 256;

/// `100 · (w_bits · a_bits) / baseline_bits² · (1 − sparsity)`.
///
/// Expects positive bit widths and `0 ≤ sparsity < 1`.
pub fn rel_bops(w_bits: u32, a_bits: u32, sparsity: f64, baseline_bits: u32) -> f64 {
    let bits = (w_bits as f64 * a_bits as f64) / (baseline_bits as f64 * baseline_bits as f64);
    100.0 * bits * (1.0 - sparsity)
}

/// Predicted class per sample, in dataset order.
pub fn predictions(model: &dyn Classifier, data: &LabeledImages) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for b in eval_batches(data, EVAL_BATCH)? {
        let z = model.logits(&b.x)?;
        let (rows, _) = z.rows_cols();
        out.extend((0..rows).map(|r| argmax(z.row(r))));
    }
    Ok(out)
}

/// Softmax scores `[N×K]`, in dataset order.
pub fn class_probabilities(model: &dyn Classifier, data: &LabeledImages) -> Result<DenseTensor> {
    let k = model.num_classes();
    let mut scores = Vec::with_capacity(data.len() * k);
    for b in eval_batches(data, EVAL_BATCH)? {
        scores.extend_from_slice(softmax_rows(&model.logits(&b.x)?).data());
    }
    DenseTensor::new(vec![data.len(), k], scores)
}

/// Top-1 accuracy in percent.
pub fn evaluate_accuracy(model: &dyn Classifier, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let pred = predictions(model, data)?;
    let correct = pred
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| **p == **y as usize)
        .count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(model: &dyn Classifier, data: &LabeledImages) -> Result<Vec<Vec<u64>>> {
    let k = data.num_classes().max(model.num_classes());
    let mut m = vec![vec![0u64; k]; k];
    for (p, y) in predictions(model, data)?.into_iter().zip(data.labels()) {
        m[*y as usize][p] += 1;
    }
    Ok(m)
}

/// Size and latency of the reference model that ratios are taken against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub size_bytes: u64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub method: String,
    pub accuracy_pct: f64,
    pub nonzero_params: u64,
    pub size_bytes: u64,
    pub latency: LatencyReport,
    pub compression_x: f64,
    pub speedup_x: f64,
    pub rel_bops_pct: f64,
}

impl TradeoffRecord {
    pub fn new(
        method: impl Into<String>,
        accuracy_pct: f64,
        nonzero_params: u64,
        size_bytes: u64,
        latency: LatencyReport,
        baseline: Baseline,
        rel_bops_pct: f64,
    ) -> Result<Self> {
        if size_bytes == 0 || !(latency.mean_ms > 0.0) {
            return Err(Error::config("size and latency must be positive"));
        }
        Ok(Self {
            method: method.into(),
            accuracy_pct,
            nonzero_params,
            size_bytes,
            compression_x: baseline.size_bytes as f64 / size_bytes as f64,
            speedup_x: baseline.latency_ms / latency.mean_ms,
            latency,
            rel_bops_pct,
        })
    }
}
