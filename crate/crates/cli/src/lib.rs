//! Library side of the command-line tool: tensor file format, run config,
//! synthetic data generation, and the command implementations.

pub mod commands;
pub mod config;
pub mod synth;
pub mod tensorfile;

pub use commands::{resolve_seed, run, Cli, Command};
