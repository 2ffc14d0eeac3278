//! Library side of the `seaice` binary: the run configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
