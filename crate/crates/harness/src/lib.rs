//! Command-line harness around `asdfd-core`: run configuration, checkpoints,
//! metrics streams and the scripted experiments.

pub mod audit;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod experiments;
pub mod export;
pub mod metrics;

pub use config::RunConfig;

/// A problem with the run configuration or command line (exit status 2).
#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);
