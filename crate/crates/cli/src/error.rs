//! Exit-code classification and the one-line error record.

use std::fmt::Display;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    /// Bad input: config, flags, missing or malformed files. Exit 2.
    Validation,
    /// Numeric or IO failure after inputs were accepted. Exit 3.
    Runtime,
}

/// Printed to stderr as a single JSON object per failure.
#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(rename = "error")]
    pub kind: ErrorKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            field: None,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            field: None,
            message: message.into(),
        }
    }

    /// An input file that cannot be read.
    pub fn input(path: &Path, err: impl Display) -> Self {
        Self::validation(format!("{}: {err}", path.display()))
    }

    pub fn parse(path: &Path, err: &toml::de::Error) -> Self {
        let at = err.span().map(|s| format!(" (byte {})", s.start)).unwrap_or_default();
        Self::validation(format!("{}{at}: {}", path.display(), err.message().trim()))
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Runtime => 3,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"error\":\"runtime\",\"message\":{:?}}}", self.message))
    }
}

impl From<gyromix::Error> for CliError {
    fn from(e: gyromix::Error) -> Self {
        match e {
            gyromix::Error::InvalidConfig { field, msg } => Self::field(field, msg),
            e if e.is_validation() => Self::validation(e.to_string()),
            e => Self::runtime(e.to_string()),
        }
    }
}
