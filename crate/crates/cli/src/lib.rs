//! Experiment front end: configuration files, run directories, analysis
//! outputs and reports.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or precondition error, 3 training
//! collapse (partial artifacts kept), 4 finished with degenerate iterations.

pub mod commands;
pub mod compare;
pub mod config;

use rloop_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_COLLAPSE: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                Error::TrainingCollapse { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => {
                    EXIT_COLLAPSE
                }
                Error::Io(_) => EXIT_FAILURE,
                _ => EXIT_CONFIG,
            },
            CliError::Io(_) => EXIT_FAILURE,
        }
    }
}
