//! Experiment harness: data, the end-to-end pipeline, diagnostics and reports.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod pipeline;
pub mod report;

pub use config::{AttackGrid, DatasetConfig, DatasetKind, RunConfig, DEFAULT_EPSILONS};
pub use data::{load_idx, synthetic_dataset, Dataset, Split};
pub use pipeline::{evaluate, run_pipeline, TrainedModels};
pub use report::{emit_report, AccuracyRow, CleanSummary, EvalReport, RunManifest, Threat};
