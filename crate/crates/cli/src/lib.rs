//! Library surface of the `maemi` CLI: configuration loading, shared
//! pipeline plumbing, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use error::{CliError, Result};
