use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The CLI maps these onto process exit codes: config errors exit 1, data
/// and I/O errors exit 2, failed checks exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("duplicate domain `{0}`")]
    DuplicateDomain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::CheckFailed(_) => 3,
            _ => 2,
        }
    }
}
