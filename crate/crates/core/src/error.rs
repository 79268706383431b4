use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: {message}")]
    Schema { file: String, message: String },

    #[error("invalid value for station {station}: {message}")]
    Value { station: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("degenerate transform for {name}: all values equal to {value}")]
    DegenerateTransform { name: String, value: f64 },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("Cholesky factorization failed{context}: matrix not positive definite after jitter {jitter:e}")]
    Factorization { context: String, jitter: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(file: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            message: message.into(),
        }
    }

    /// Attach a location (chain, iteration, stage) to a factorization failure.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::Factorization { context, jitter } => Error::Factorization {
                context: format!("{context} ({})", ctx.as_ref()),
                jitter,
            },
            other => other,
        }
    }

    /// Stable machine-readable code printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Schema { .. } => "E_SCHEMA",
            Error::Value { .. } => "E_VALUE",
            Error::Integrity(_) => "E_INTEGRITY",
            Error::DegenerateTransform { .. } => "E_DEGENERATE_TRANSFORM",
            Error::Rank(_) => "E_RANK",
            Error::Design(_) => "E_DESIGN",
            Error::Factorization { .. } => "E_FACTORIZATION",
            Error::InsufficientData(_) => "E_INSUFFICIENT_DATA",
            Error::Diagnostics(_) => "E_DIAGNOSTICS",
            Error::Validation(_) => "E_VALIDATION",
            Error::Config(_) => "E_CONFIG",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Schema { .. } | Error::Value { .. } | Error::Integrity(_) => 3,
            Error::Config(_) => 4,
            _ => 5,
        }
    }
}
