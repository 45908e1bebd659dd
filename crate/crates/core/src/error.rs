use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} = {value} is outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("degenerate schedule at t = {t}: |alpha*beta' - alpha'*beta| = {discriminant:e}")]
    DegenerateSchedule { t: f64, discriminant: f64 },

    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("condition ratio diverges: E|dx|^2 = 0 at t1 = {t1}, t2 = {t2}")]
    Divergent { t1: f64, t2: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("zero matrix has no condition number")]
    ZeroMatrix,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {reason}")]
    TrainingDiverged {
        step: usize,
        batch_seed: u64,
        reason: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config key `{key}` (line {line}): {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::DegenerateSchedule { .. }
                | Error::IntegrationDiverged { .. }
                | Error::Divergent { .. }
                | Error::ZeroMatrix
                | Error::TrainingDiverged { .. }
        )
    }
}
