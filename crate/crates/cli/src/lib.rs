//! Experiment runner behind the `reslab` binary.

pub mod config;
pub mod run;

pub use config::{load, resolve_tau, Command, ConfigError, ExperimentConfig, TauMode};
pub use run::{run, RunSummary};
