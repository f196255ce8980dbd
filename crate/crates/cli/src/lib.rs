//! Command-line harness: run configuration, checkpoints, metric logs and the
//! train / eval / generate / sample-quality commands.

pub mod checkpoint;
pub mod classifier;
pub mod commands;
pub mod config;
pub mod metrics;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, RunConfig};
