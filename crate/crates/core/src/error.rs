use thiserror::Error;

/// Library-wide error type.
///
/// `Config` maps to CLI exit code 2, the numerical variants map to exit
/// code 3, I/O failures to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("linear algebra failure: {0}")]
    LinAlg(String),

    #[error("mixture fit failed: {0}")]
    MixtureFit(String),

    #[error("density underflow: {0}")]
    DensityUnderflow(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI should terminate with for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 1,
            _ => 3,
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
