use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A rollback was requested for a window that already starts at the prompt boundary.
    #[error("cannot roll back window starting at {start}: prompt ends at {prompt_len}")]
    RollbackAtOrigin { start: usize, prompt_len: usize },

    #[error("cache miss: no entry for block {block}")]
    CacheMiss { block: usize },

    /// Step cap exceeded. Indicates an invariant bug in the decoder or a denoiser
    /// that breaks its contract.
    #[error("decode exceeded step cap of {cap} evaluations")]
    Runaway { cap: u64 },

    /// A denoiser broke its output contract.
    #[error("denoiser contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("wire protocol: {0}")]
    Wire(String),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
