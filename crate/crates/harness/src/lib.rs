//! Dataset ingestion, experiment configs, run orchestration and the CLI.

pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;

pub use cli::run_cli;
