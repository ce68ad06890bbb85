//! File formats, run directories and the command implementations behind the
//! `lfit` binary.
//!
//! Data arrives as a long-format CSV (`series_id,timestamp,<channels>`) with
//! a JSON schema naming each column's role and an optional statics sidecar.
//! Every command writes into a run directory and records a manifest with the
//! effective configuration and SHA-256 digests of its inputs and outputs.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod parallel;

pub use config::{DataSource, Overrides, RunConfig};
pub use error::{CliError, Result};

/// File name of the trained model inside a run directory.
pub const MODEL_FILE: &str = "model.lfit";
