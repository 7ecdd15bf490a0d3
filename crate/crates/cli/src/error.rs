use std::fmt;
use std::path::Path;

use frk_core::FrkError;

/// Failure category, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: Kind::Config, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    /// Library error raised while processing data: numerical breakdown or
    /// bad input.
    pub fn frk(context: impl fmt::Display, e: FrkError) -> Self {
        let kind = if e.is_numerical() { Kind::Numerical } else { Kind::Data };
        Self { kind, message: format!("{context}: {e}") }
    }

    /// Library error caused by a configuration value.
    pub fn frk_config(context: impl fmt::Display, e: FrkError) -> Self {
        Self::config(format!("{context}: {e}"))
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::config(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
