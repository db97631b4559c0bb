//! Experiment harness behind the `slrprune` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;

pub use config::{RawConfig, RunConfig};
pub use error::CliError;
