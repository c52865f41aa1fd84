//! Experiment driver behind the `floodfuse` binary. Every subcommand is a
//! plain function in [`commands`] so it can be called from tests.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;

pub use error::{CliError, Result};
