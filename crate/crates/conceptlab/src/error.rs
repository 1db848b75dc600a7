use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the library
/// distinguishes at its boundaries: schema violations (data that contradicts
/// a declared structure), bad arguments, bad configuration, checkpoint
/// incompatibilities, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// A probe cannot be trained because some value of the named variable
    /// never occurs in the dataset labels.
    #[error("probe for variable `{variable}` is untrainable: value `{value}` never occurs in the dataset")]
    UntrainableProbe { variable: String, value: String },

    /// Training aborted on a non-finite loss. When a diagnostics directory
    /// was configured, `dump` points at the state dump written before abort.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        dump: Option<PathBuf>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk artifact (container, manifest, CSV...).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
