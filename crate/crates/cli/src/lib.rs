//! Experiment runner: TOML configs in, per-seed CSVs and summaries out.

pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod recipes;
pub mod results;
pub mod sweep;

pub use error::{CliError, CliResult};
