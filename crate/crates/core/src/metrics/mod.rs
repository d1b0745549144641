//! Latency harness, accuracy and size accounting, ROC/PR, Pareto fronts
//! and report files.

pub mod latency;
pub mod pareto;
pub mod records;
pub mod report;
pub mod roc;

pub use latency::{measure_latency, BenchConfig, LatencyReport};
pub use pareto::{dominates, pareto_frontier, pareto_indices, Objectives};
pub use records::{
    class_probabilities, confusion_matrix, evaluate_accuracy, predictions, rel_bops, Baseline,
    TradeoffRecord,
};
pub use report::{
    check_thread_counts, csv_string, emit_records, emit_report, json_string, parse_csv,
    write_curve_file, write_frontier_file, ReportFormat, ReportRow, CSV_COLUMNS,
};
pub use roc::{binary_curves, roc_pr_curves, BinaryCurves, Curve, RocPrReport};
