//! Experiment runner for CSI robustness benchmarks.
//!
//! A configuration file ([`config`]) names a dataset, models, attacks and
//! defenses; [`runner::run_experiment`] evaluates the full grid for every
//! seed and [`report`] serializes the records.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{BenchError, Result};
pub use report::{ReportRecord, SummaryRow};
pub use runner::{run_experiment, write_outputs, RunOutput};
