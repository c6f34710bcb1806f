use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or malformed input (bad shapes, out-of-range ids, empty corpora).
    #[error("validation: {0}")]
    Validation(String),

    /// A sprite or trajectory would leave the frame.
    #[error("bounds: {0}")]
    Bounds(String),

    /// Resolved configuration is inconsistent or incomplete.
    #[error("config: {0}")]
    Config(String),

    /// An artifact another subcommand produces is missing. Carries the
    /// subcommand to run first.
    #[error("missing prerequisite: {what} (run `{run_first}` first)")]
    MissingPrerequisite { what: String, run_first: String },

    /// On-disk data does not match its declared schema.
    #[error("format: {0}")]
    Format(String),

    /// A referenced file is absent or a digest does not match.
    #[error("integrity: {0}")]
    Integrity(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 missing prerequisite,
    /// 4 numeric, 5 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingPrerequisite { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Integrity(_) => 5,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
