//! File formats, configuration and subcommands for the `dmegp` tool.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod manifest;
pub mod model_file;
pub mod parallel;

pub use config::RunConfig;
pub use error::{CliError, Result};
