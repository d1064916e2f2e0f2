//! Command-line front end: configuration merging and the subcommand
//! implementations used by the `cgs` binary.

pub mod commands;
pub mod config;
