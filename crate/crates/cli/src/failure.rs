use std::fmt;
use std::path::Path;

use branchseg::Error;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub field: Option<String>,
    pub message: String,
}

impl Failure {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "config",
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "input",
            field: None,
            message: message.into(),
        }
    }

    pub fn missing(path: &Path) -> Self {
        Self {
            code: 3,
            kind: "missing",
            field: None,
            message: format!("missing file {}", path.display()),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::other(format!("{}: {e}", path.display()))
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "runtime",
            field: None,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let kind = match &e {
            Error::Config { field, message } => return Failure::config(field.clone(), message.clone()),
            Error::MissingFile(_) => "missing",
            Error::Shape { .. } => "shape",
            Error::UnknownLabelValue { .. } | Error::Load { .. } => "input",
            _ => "runtime",
        };
        Self {
            code: if kind == "runtime" { 1 } else { 3 },
            kind,
            field: None,
            message,
        }
    }
}

/// One line: `error kind=<kind> code=<code> [field=<path>] message=<json string>`.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={} code={}", self.kind, self.code)?;
        if let Some(field) = &self.field {
            write!(f, " field={}", if field.is_empty() { "." } else { field })?;
        }
        let message = serde_json::to_string(&self.message).unwrap_or_else(|_| "\"\"".into());
        write!(f, " message={message}")
    }
}
