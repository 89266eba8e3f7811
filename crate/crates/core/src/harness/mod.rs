//! Training driver, baselines, evaluation, metrics and sweeps.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod stats;
pub mod sweep;
pub mod train;

pub use config::{EnvSpec, EstimatorConfig, EvalMode, InitSpec, RunConfig, Strategy};
pub use eval::evaluate;
pub use metrics::{export_metrics, import_metrics, MetricsFormat, MetricsRecord, COLUMNS};
pub use sweep::{run_variants, sweep, SweepRow, SweepSummary};
pub use train::{run_training, RunCheckpoint, RunOutput, RunSetup, StepBatch, Trainer};
