//! Command-line front end for the `qot-core` experiments.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{run, CliError};
pub use config::{CommandKind, ConfigError, ExperimentConfig, RawConfig};
