//! Experiment driver behind the `sgn` binary.

pub mod commands;
pub mod config;
pub mod layout;
pub mod plots;
