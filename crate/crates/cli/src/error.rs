use serde::Serialize;

use cste_core::ErrorClass;

/// Error surfaced to the user: a stable code, a class that picks the exit
/// status, and a message.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub code: String,
    pub class: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), class: "config", message: message.into() }
    }

    pub fn data(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), class: "data", message: message.into() }
    }

    pub fn numeric(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), class: "numeric", message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            "config" => 2,
            "data" => 3,
            _ => 4,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.class, self.message)
    }
}

impl From<cste_core::Error> for CliError {
    fn from(e: cste_core::Error) -> Self {
        let class = match e.class() {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        };
        CliError { code: e.code().into(), class, message: e.to_string() }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data("cli.csv", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::config("cli.json", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
