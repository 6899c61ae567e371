//! Evaluation metrics, experiment manifests and report emission.

mod manifest;
mod metrics;

pub use manifest::{
    aggregate_runs, merge_checkpoints, run_manifest, write_report, CellSummary, ExperimentManifest, Grid, ManifestReport,
    Method, ZeroShotGrid, ZeroShotRow, AGGREGATE_CSV, FAILURES_CSV, LONG_CSV, RAW_CSV, ZEROSHOT_CSV,
};
pub use metrics::{confusion_matrix, macro_f1, mean_std, per_class_f1};
