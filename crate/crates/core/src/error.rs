use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation precondition (shape, range, configuration).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("corrupt checkpoint {path}: {reason} (at byte offset {offset})")]
    CorruptCheckpoint {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training failed to reach its target: {0}")]
    NotConverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

/// Returns a contract violation unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
