use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, window needs {window}")]
    SignalTooShort { len: usize, window: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("matrix is not Hermitian (asymmetry {0:e})")]
    NotHermitian(f64),

    #[error("rank deficiency exceeds one ({zero_eigenvalues} near-zero eigenvalues)")]
    RankDeficiency { zero_eigenvalues: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("denoiser failed: {message}")]
    Adapter { message: String, stderr: String },

    #[error("no speech detected in any separated source")]
    NoSpeech,

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidInput(_) | Error::UnsupportedFormat(_) => 2,
            Error::Adapter { .. } => 4,
            Error::Wav { .. } | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
