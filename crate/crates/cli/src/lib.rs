//! Command-line front end for the federated pre-training simulator.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on invalid input.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{CliError, CliResult, Overrides};
pub use config::{ExperimentConfig, Method};
