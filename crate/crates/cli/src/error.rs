use std::fmt;

/// Process exit codes.
pub mod code {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(lowflow::Error),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lowflow::Error> for CliError {
    fn from(e: lowflow::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        match e.classify() {
            serde_json::error::Category::Io => CliError::Io(e.into()),
            _ => CliError::Usage(format!("bad manifest: {e}")),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Usage problems (including bad config values) map to 2, numerical
/// failures to 3, and unreadable or malformed input files to 4.
pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Usage(_) => code::USAGE,
        CliError::Io(_) => code::IO,
        CliError::Lib(le) if le.is_numeric() => code::NUMERIC,
        CliError::Lib(lowflow::Error::Io(_) | lowflow::Error::Parse { .. }) => code::IO,
        CliError::Lib(_) => code::USAGE,
    }
}
