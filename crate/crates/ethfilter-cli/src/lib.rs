//! Staged command-line pipeline: bounds, evolve, assemble, oracle, compare.

pub mod cache;
pub mod commands;
pub mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(ethfilter::Error),
    #[error("tolerance: {0}")]
    Tolerance(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ethfilter::Error> for CliError {
    fn from(e: ethfilter::Error) -> Self {
        match e {
            ethfilter::Error::InvalidParameter(m) => CliError::Config(m),
            other => CliError::Numeric(other),
        }
    }
}

impl CliError {
    /// Process exit code: 2 configuration, 3 numerical or I/O failure, 4 tolerance exceeded.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) | CliError::Io(_) => 3,
            CliError::Tolerance(_) => 4,
        }
    }
}
