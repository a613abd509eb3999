//! Command implementations and run configuration for the `mixopt` binary.

pub mod commands;
pub mod config;
