//! Command-line front end of `cellcycle`: INI configuration, the five
//! commands and their CSV outputs.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run_eigen, run_simulate, run_sweep, run_twophase, run_validate, Summary};
pub use config::{ConfigSource, RunConfig};
pub use error::{CliError, Result};
