use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {term}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { term: String, step: Option<u64> },

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("state error: {0}")]
    State(String),

    #[error("schema error: missing or incomplete section `{0}`")]
    Schema(String),

    #[error("missing input artifact: {}", .0.display())]
    Dependency(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("run `{variant}` with seed {seed} failed: {source}")]
    Run {
        variant: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "validation",
            Error::Format(_) => "format",
            Error::Integrity(_) => "integrity",
            Error::State(_) => "state",
            Error::Schema(_) => "schema",
            Error::Dependency(_) => "dependency",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serialization",
            Error::Run { .. } => "run",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
