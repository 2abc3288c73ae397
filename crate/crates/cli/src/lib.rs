//! File formats, IO and command implementations for the `visa` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod render;

pub use error::{CliError, Result};
