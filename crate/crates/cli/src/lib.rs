//! Command-line front end and file formats for the hybrid-memory library:
//! experiment configs (TOML), binary checkpoints, line-delimited metrics,
//! and a threaded batch runner.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod runner;

/// Command error carrying the process exit code:
/// 1 = configuration/usage error, 2 = run divergence, 3 = verification
/// failure.
#[derive(Debug, Clone)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        CliError { code: 1, message }
    }

    pub fn diverged(message: String) -> Self {
        CliError { code: 2, message }
    }

    pub fn verify_failed(message: String) -> Self {
        CliError { code: 3, message }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<hqlt_core::Error> for CliError {
    fn from(e: hqlt_core::Error) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(format!("io error: {e}"))
    }
}
