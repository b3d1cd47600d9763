//! File formats, experiment campaigns and reporting around `mpdetect-core`.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod formats;
pub mod report;

pub use config::{ExperimentConfig, PhaseMode, SvmConfig};
pub use experiment::{run_type1, run_type2, Experiment, Model, ResultRow, ResultTable, RowKey};
