use std::fmt;

/// Failure of one CLI run, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// TOML syntax or schema error; the message already carries line and column.
    Parse(String),
    /// A value failed validation.
    Config { field: String, reason: String, line: Option<usize> },
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse(msg) => write!(f, "config error: {}", msg.trim_end()),
            CliError::Config { field, reason, line: Some(line) } => {
                write!(f, "config error: {field} (line {line}): {reason}")
            }
            CliError::Config { field, reason, line: None } => write!(f, "config error: {field}: {reason}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
