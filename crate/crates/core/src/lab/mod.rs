//! Experiment runner: configuration, artifact schemas and reports.

pub mod artifacts;
pub mod config;
pub mod report;
mod run;

pub use artifacts::{bucket_summary, count_refined, Bucket, HistoryRow, ProfileRow};
pub use config::{DatasetSpec, ExperimentConfig, OptimSpec, OuterSpec, PRESETS};
pub use report::{emit_reports, INF_BUCKET};
pub use run::{run, run_on, RunArtifacts};
