//! Training, evaluation and tiled inference.

mod adam;
mod infer;
mod metrics;
mod train;

pub use adam::{step_adam, AdamConfig, AdamState};
pub use infer::{infer_tiled, infer_tiled_report, refine_tile, InferReport, TileLayout};
pub use metrics::{evaluate, metrics_from_errors, Metrics, MetricsReport, PatchMetrics, ACC_THRESHOLD};
pub use train::{train, train_with, validation_l1, Flow, HistoryRow, Progress, TrainConfig, TrainOutcome};
