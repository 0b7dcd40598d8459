//! Batch front end for `hjb-bsde-core`: JSON experiment configs in, CSV artifacts out.

pub mod compare;
pub mod config;
pub mod run;

use std::fmt;

/// Failure classes, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("run aborted: {0}")]
    Runtime(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Malformed(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl fmt::Display, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_string(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
