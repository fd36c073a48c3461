//! Command-line front end: parses run configurations, dispatches analyses,
//! training runs, sweeps and gradient checks, and writes CSV artifacts.

pub mod args;
pub mod commands;
pub mod config;

pub use args::Cli;
pub use config::RunConfig;

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<resprop::Error> for CliError {
    fn from(e: resprop::Error) -> Self {
        match e {
            resprop::Error::InvalidArgument(m) | resprop::Error::Unsupported(m) => CliError::Validation(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
