use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
///
/// Runtime failures a caller can plausibly hit (bad inputs, malformed files,
/// diverged training) are reported through this enum. Internal contract
/// violations such as mismatched trace/parameter shapes panic instead and are
/// documented on the offending function.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value handed to a numeric operation lies outside its documented domain.
    #[error("input domain: {0}")]
    InputDomain(String),
    /// Artifact metadata disagrees with the task it is applied to.
    #[error("mismatch: {0}")]
    Mismatch(String),
    /// Invalid configuration document or field value.
    #[error("config: {0}")]
    Config(String),
    /// Command-line usage error.
    #[error("usage: {0}")]
    Usage(String),
    /// Malformed container or checkpoint bytes.
    #[error("format: {0}")]
    Format(String),
    /// Training or evaluation produced non-finite values.
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 0 ok, 2 usage, 3 IO, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Mismatch(_) => 2,
            Error::Io { .. } | Error::Format(_) => 3,
            Error::InputDomain(_) | Error::Numeric(_) => 4,
        }
    }
}
