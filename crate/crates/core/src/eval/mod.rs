//! Metrics and the benchmark harness.

mod bench;
mod metrics;

pub use bench::{
    bench_run, evaluate, gate_stats, improvement_table, prepare_input, BenchGrid, CellResult, EvalOptions, GateRow,
    MetricsReport, MetricsRow, CLEAN, CORRUPTION_AVG, CSV_HEADER, IMPROVEMENT_HEADER,
};
pub use metrics::{
    class_hits, gt_triplets, match_triplets, mean_recall_at_k, recall_at_k, GtTriplet, SceneHits,
};
