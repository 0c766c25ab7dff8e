use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{op} requires a non-empty input")]
    EmptyInput { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    #[error("batch size {0} is too small, need at least 2")]
    BatchTooSmall(usize),

    #[error("trajectory of length {0} is too short, need at least 2 frames")]
    TrajectoryTooShort(usize),

    #[error("{0} is missing action annotations")]
    MissingActions(String),

    #[error("loss became non-finite at iteration {iteration} (batch seed {batch_seed})")]
    NonFiniteLoss { iteration: usize, batch_seed: u64 },

    #[error("checkpoint and data do not match: {0}")]
    Incompatible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
