//! Experiment runner: configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use commands::{cmd_build_bench, cmd_diagnose, cmd_personalize, cmd_train};
pub use config::{ExperimentConfig, Overrides};
