use std::path::PathBuf;

/// Error type shared by all modules. Variants are grouped by the exit-code
/// category they map to on the CLI: input/validation (2), numeric (3),
/// internal (4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("failed to parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate region '{region}': {detail}")]
    DegenerateRegion { region: String, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// CLI exit code for this error: 2 input/validation, 3 numeric, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Config(_)
            | Error::Argument(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::DegenerateRegion { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Internal(_) => 4,
        }
    }

    /// Short machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::DegenerateRegion { .. } => "degenerate-region",
            Error::Numeric(_) => "numeric",
            Error::Internal(_) => "internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
