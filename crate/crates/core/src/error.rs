use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but does not follow its container format.
    #[error("format error: {0}")]
    Format(String),

    /// Arguments disagree with each other (shapes, dims, lengths).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inputs outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerically invalid data (NaN, infinities).
    #[error("data error: {0}")]
    Data(String),

    #[error("missing artifact: {}", .0.display())]
    ArtifactMissing(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("external tool failed: {0}")]
    External(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Stable machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "artifact-missing"
            }
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Contract(_) => "contract",
            Error::Domain(_) => "domain",
            Error::Data(_) => "data",
            Error::ArtifactMissing(_) => "artifact-missing",
            Error::Config(_) => "config",
            Error::External(_) => "external",
            Error::Tensor(_) => "internal",
        }
    }
}
