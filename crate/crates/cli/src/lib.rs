//! Experiment harness for the `popot` solvers: JSON configs, runs that write
//! CSV traces and JSON summaries, ensemble bound reports and plot data.

pub mod config;
pub mod experiment;

pub use config::{load_config, parse_config, write_config, ConfigError, ExperimentConfig, SolverKind};
pub use experiment::{emit_plot_data, execute, report_ensemble, run, RunError, RunOutput, RunSummary, PLOT_PANELS};
