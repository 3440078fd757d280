//! Experiment configs, the runner behind the `covtool` binary, and its
//! reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::{parse_config, ExperimentConfig, Format, Mode, Phi, RawConfig};
pub use report::{emit, format_g12, render, ReportRow, CSV_HEADER};
pub use run::{apply_budget_env, execute, run_experiment, Outcome, EXIT_ERROR, EXIT_OK, EXIT_TOLERANCE};
