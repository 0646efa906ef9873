//! Experiment harness: config parsing, job orchestration and CSV output
//! for noise sweeps, hyper-parameter stability sweeps and multi-task
//! regularizer comparisons.

pub mod commands;
pub mod config;
pub mod error;
pub mod jobs;
pub mod schema;

pub use commands::{cmd_multitask, cmd_noise_sweep, cmd_stability_sweep, cmd_train, RunOptions};
pub use config::{ExperimentConfig, ModeName};
pub use error::CliError;
