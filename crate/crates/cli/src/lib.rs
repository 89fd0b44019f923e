//! Command-line toolkit for slice recovery in voxel orientation volumes:
//! synthetic volume generation, model training, slice recovery, method
//! evaluation, attention benchmarking, and format conversion.

pub mod commands;
pub mod config;
pub mod formats;

use thiserror::Error;

/// CLI failures, split by exit code: usage and configuration problems exit
/// with 2, runtime failures with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
