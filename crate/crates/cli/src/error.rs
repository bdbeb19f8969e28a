//! Command-line error type. Usage errors (bad flags or configuration) exit
//! with code 2; run failures exit with code 1.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The invocation itself is wrong: bad flag value, unknown
    /// configuration key, out-of-range index.
    #[error("{0}")]
    Usage(String),
    /// A checkpoint file could not be read or does not fit the model.
    #[error("checkpoint {path}: {problem}")]
    Checkpoint { path: PathBuf, problem: String },
    /// The command ran but could not complete.
    #[error("{0}")]
    Failed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] rga_tensor::TensorError),
    #[error(transparent)]
    Attention(#[from] rga_attention::AttentionError),
    #[error(transparent)]
    Reid(#[from] rga_reid::ReidError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
