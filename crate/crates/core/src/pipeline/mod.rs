//! Ordered stage plans, their execution, checkpoints and the ordering
//! ablation.

pub mod ablate;
pub mod checkpoint;
pub mod plan;
pub mod run;

pub use ablate::{ablate_orderings, ablation_csv, AblationTable, OrderSummary};
pub use checkpoint::{
    count_nonzero, load_checkpoint, save_checkpoint, Checkpoint, HistoryEntry, MetricsSnapshot,
    Payload,
};
pub use plan::{
    all_orders, default_orders, format_order, order_label, parse_order, Stage, StageConfig,
    StageKind, StagePlan, StageTraining, DEFAULT_ORDER,
};
pub use run::{
    baseline_checkpoint, bench_input, measure_checkpoint, run_pipeline, run_stage, tradeoff_record,
    BenchSettings, Model, ModelState, PipelineRun, StageContext, StageSnapshot,
};
