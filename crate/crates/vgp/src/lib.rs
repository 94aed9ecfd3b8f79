//! Command-line driver for `vgp-core`: run configuration, checkpoint and
//! CSV formats, and the `fit`, `eval`, `check-grad`, `universal` and
//! `oracle` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::RunConfig;
pub use error::{CliError, CliResult, EXIT_RUNTIME, EXIT_USAGE};
