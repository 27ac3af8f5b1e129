use std::fmt;
use std::process::ExitCode;

use crate::config::ConfigError;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    /// Malformed input data (plot CSVs). `row` is 1-based and counts the header.
    Input {
        row: Option<usize>,
        message: String,
    },
    Runtime {
        phase: &'static str,
        message: String,
    },
    /// One or more self-test checks failed; each entry describes a violation.
    Selftest(Vec<String>),
}

impl CliError {
    pub fn runtime(phase: &'static str, err: impl fmt::Display) -> Self {
        CliError::Runtime {
            phase,
            message: err.to_string(),
        }
    }

    pub fn input(row: Option<usize>, message: impl Into<String>) -> Self {
        CliError::Input {
            row,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Selftest(_) => 1,
            CliError::Config(_) | CliError::Input { .. } => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Input { row: Some(r), message } => write!(f, "input error at row {r}: {message}"),
            CliError::Input { row: None, message } => write!(f, "input error: {message}"),
            CliError::Runtime { phase, message } => write!(f, "runtime error during {phase}: {message}"),
            CliError::Selftest(v) => write!(f, "self-test failed: {}", v.join("; ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}
