//! Reproducible experiment runner for learned digital backpropagation:
//! configuration, data sets, staged training, artifacts and reports.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod io;
pub mod receiver;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Integrity(_) => 3,
            CliError::Divergence { .. } => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ldbp::Error> for CliError {
    fn from(e: ldbp::Error) -> Self {
        match e {
            ldbp::Error::Divergence { iteration, loss } => CliError::Divergence { iteration, loss },
            other => CliError::Config(other.to_string()),
        }
    }
}
