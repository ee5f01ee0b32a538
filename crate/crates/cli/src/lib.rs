//! Experiment runner for the cross-domain feature augmentation toolkit:
//! configuration, run/sweep/ablation execution, and study exports.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{CliError, CliResult, ExperimentConfig};
