use std::fmt;

use slimkit::Error;

/// Process exit codes.
pub const VIOLATION: u8 = 1;
pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const INFEASIBLE: u8 = 4;

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: DATA, message: message.into() }
    }

    pub fn violation(message: impl Into<String>) -> Self {
        Self { code: VIOLATION, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::RankOutOfRange { .. } | Error::PlanMismatch(_) => CONFIG,
            Error::BudgetInfeasible(_) => INFEASIBLE,
            _ => DATA,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

pub fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("cannot parse {}: {e}", path.display())))
}

pub fn write_text(path: &std::path::Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::data(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}
