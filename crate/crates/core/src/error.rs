use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit-code categories:
/// config errors exit 2, missing artifacts exit 3, numerical failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed wav header: {0}")]
    MalformedWav(String),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedWav(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numerical error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-parseable category prefix used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::MissingFile(_) => "io",
            Error::MalformedWav(_) | Error::UnsupportedWav(_) => "wav",
            Error::Precondition(_) | Error::ShapeMismatch(_) => "input",
            Error::Config(_) => "config",
            Error::MissingArtifact(_) => "artifact",
            Error::Numeric(_) => "numeric",
        }
    }

    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) | Error::MissingFile(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
