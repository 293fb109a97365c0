//! Command-line front end: experiment files, subcommands, ablation sweeps
//! and their charts.

pub mod chart;
pub mod checks;
pub mod commands;
pub mod spec;

pub use spec::{Axis, ExperimentSpec};
