//! Stage-order ablation: the same stages and budgets, permuted.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};

use super::checkpoint::Checkpoint;
use super::plan::{format_order, order_label, Stage, StagePlan, StageTraining};
use super::run::{run_pipeline, BenchSettings, PipelineRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub label: String,
    pub order: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub acc_mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub acc_std: f64,
    pub sizes: Vec<u64>,
    pub latency_means: Vec<f64>,
}

impl OrderSummary {
    pub fn latency_spread(&self) -> (f64, f64) {
        let lo = self
            .latency_means
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .latency_means
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<OrderSummary>,
    /// Every run of every order produced a checkpoint of the same size.
    pub sizes_identical: bool,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn same_stages(a: &[Stage], b: &[Stage]) -> bool {
    let sorted = |s: &[Stage]| {
        let mut v = s.to_vec();
        v.sort_by_key(Stage::kind);
        v
    };
    sorted(a) == sorted(b)
}

/// Runs every order once per seed. `on_run` sees each finished run, e.g. to
/// write it to disk.
pub fn ablate_orderings(
    orders: &[Vec<Stage>],
    seeds: &[u64],
    baseline: &Checkpoint,
    data: &Split,
    training: StageTraining,
    bench: &BenchSettings,
    on_run: &mut dyn FnMut(&[Stage], u64, &PipelineRun) -> Result<()>,
) -> Result<AblationTable> {
    if orders.is_empty() || seeds.is_empty() {
        return Err(Error::config(
            "an ablation needs at least one order and one seed",
        ));
    }
    if let Some(o) = orders.iter().find(|o| !same_stages(o, &orders[0])) {
        return Err(Error::config(format!(
            "order {} does not use the same stages and budgets as {}",
            format_order(o),
            format_order(&orders[0])
        )));
    }
    let mut rows = Vec::with_capacity(orders.len());
    for order in orders {
        let mut accuracies = Vec::new();
        let mut sizes = Vec::new();
        let mut latency_means = Vec::new();
        for &seed in seeds {
            let mut plan = StagePlan::new(order.clone(), seed)?;
            plan.training = training;
            let run = run_pipeline(&plan, baseline, data, bench)?;
            on_run(order, seed, &run)?;
            accuracies.push(run.record.accuracy_pct);
            sizes.push(run.record.size_bytes);
            latency_means.push(run.record.latency.mean_ms);
        }
        let (acc_mean, acc_std) = mean_std(&accuracies);
        rows.push(OrderSummary {
            label: order_label(order),
            order: format_order(order),
            seeds: seeds.to_vec(),
            accuracies,
            acc_mean,
            acc_std,
            sizes,
            latency_means,
        });
    }
    let first = rows[0].sizes[0];
    let sizes_identical = rows.iter().all(|r| r.sizes.iter().all(|&s| s == first));
    Ok(AblationTable {
        rows,
        sizes_identical,
    })
}

/// `order,runs,acc_mean,acc_std,size_bytes,sizes_identical,lat_ms_min,lat_ms_max`.
pub fn ablation_csv(table: &AblationTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::config(format!("csv: {e}"));
    w.write_record([
        "order",
        "runs",
        "acc_mean",
        "acc_std",
        "size_bytes",
        "sizes_identical",
        "lat_ms_min",
        "lat_ms_max",
    ])
    .map_err(err)?;
    for r in &table.rows {
        let (lo, hi) = r.latency_spread();
        let same = r.sizes.iter().all(|&s| s == r.sizes[0]);
        w.write_record([
            r.label.clone(),
            r.accuracies.len().to_string(),
            format!("{:.2}", r.acc_mean),
            format!("{:.2}", r.acc_std),
            r.sizes[0].to_string(),
            (same && table.sizes_identical).to_string(),
            format!("{lo:.3}"),
            format!("{hi:.3}"),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
