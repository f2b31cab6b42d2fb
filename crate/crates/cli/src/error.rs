use std::fmt;

use crate::config::ConfigError;

/// Failure reported as one `key=value` line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub key: Option<String>,
    pub msg: String,
}

impl CliError {
    pub fn runtime(msg: impl fmt::Display) -> Self {
        Self { kind: "runtime", key: None, msg: msg.to_string() }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self { kind: "io", key: None, msg: format!("{}: {e}", path.display()) }
    }

    pub fn keyed(kind: &'static str, key: &str, msg: impl fmt::Display) -> Self {
        Self { kind, key: Some(key.to_string()), msg: msg.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind == "config" {
            2
        } else {
            1
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self { kind: "config", key: Some(e.key), msg: e.msg }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={}", self.kind)?;
        if let Some(k) = &self.key {
            write!(f, " key={k}")?;
        }
        // Debug formatting escapes newlines, keeping the report on one line.
        write!(f, " msg={:?}", self.msg)
    }
}
