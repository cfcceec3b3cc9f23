//! Crate-wide error type. Variants map onto the CLI exit codes: config
//! problems exit 2, numerical failures exit 3, missing or unreadable
//! artifacts exit 4.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerics(_) => 3,
            Error::MissingArtifact(_) | Error::Format(_) | Error::Io(_) => 4,
        }
    }
}
