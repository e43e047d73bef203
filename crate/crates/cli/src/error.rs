use saft_core::SaftError;
use serde::Serialize;

/// CLI-level error: a kind tag plus a message, printed as one machine-
/// readable JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub error: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: "config",
            error: msg.into(),
        }
    }

    pub fn dependency(msg: impl Into<String>) -> Self {
        Self {
            kind: "dependency",
            error: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self {
            kind: "io",
            error: msg.into(),
        }
    }
}

impl From<SaftError> for CliError {
    fn from(e: SaftError) -> Self {
        let kind = match &e {
            SaftError::InvalidConfig(_) => "config",
            SaftError::MissingClass(_) => "dependency",
            SaftError::Format(_) => "format",
            SaftError::Io(_) => "io",
            SaftError::Generation { .. } => "generation",
            _ => "internal",
        };
        Self {
            kind,
            error: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.error)
    }
}
