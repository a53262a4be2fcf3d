//! Experiment driver: every subcommand of the `jeit` binary is a function
//! here so tests can run the pipeline in-process.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod report;

pub use config::RunConfig;

/// Exit status 1 for audit/invariant failures, 2 for configuration errors.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("audit failure: {0}")]
    Audit(String),
    #[error(transparent)]
    Core(jeit_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<jeit_core::Error> for CliError {
    fn from(e: jeit_core::Error) -> Self {
        match e {
            jeit_core::Error::Config(m) => CliError::Config(m),
            jeit_core::Error::Audit(m) => CliError::Audit(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}
