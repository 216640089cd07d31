//! Library behind the `maskdiff` binary: experiment configuration, sweep and
//! bound commands, the verification suite, and sampling runs.
//!
//! Everything is exposed as plain functions so the integration and acceptance
//! suites can drive the same code paths the binary does.

pub mod bounds;
pub mod config;
pub mod output;
pub mod sample_cmd;
pub mod stats;
pub mod sweep;
pub mod verify;

use thiserror::Error;

/// Exit codes: 0 success, 1 verification failure, 2 configuration error,
/// 3 resource guard exceeded.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("verification failed")]
    VerificationFailed,

    #[error(transparent)]
    Core(#[from] maskdiff_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::VerificationFailed => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(maskdiff_core::Error::TooLarge(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
