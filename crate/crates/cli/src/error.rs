//! CLI error type, exit codes and single-line diagnostics.

use attrbridge::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 usage, 3 config, 4 runtime or numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Argument(_)) => 2,
            CliError::Core(Error::Config(_) | Error::ConfigMismatch { .. }) => 3,
            CliError::Core(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                Error::Dimension(_) => "dimension",
                Error::Argument(_) => "argument",
                Error::Numerical(_) => "numerical",
                Error::Config(_) => "config",
                Error::Format(_) => "format",
                Error::Integrity(_) => "integrity",
                Error::ConfigMismatch { .. } => "config-mismatch",
                Error::NotFound(_) => "not-found",
                Error::Io { .. } => "io",
            },
        }
    }

    /// `error[kind]: message` on one line.
    pub fn diagnostic(&self) -> String {
        let msg = match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => {
                let mut m = e.to_string();
                let mut src = std::error::Error::source(e);
                while let Some(s) = src {
                    m.push_str(&format!(": {s}"));
                    src = s.source();
                }
                m
            }
        };
        format!("error[{}]: {}", self.kind(), one_line(&msg))
    }
}

/// Collapses whitespace runs, including newlines, to single spaces.
pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
