//! Command-line harness: configs, the pipeline steps behind each
//! subcommand, and run manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::ExperimentConfig;
pub use error::CliError;
