use std::path::PathBuf;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum NsfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient length: need at least {needed} samples, got {got}")]
    InsufficientLength { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spectrum row {row} is not conjugate-symmetric (bin {bin}, deviation {deviation:e})")]
    SymmetryViolation { row: usize, bin: usize, deviation: f64 },

    #[error("frequency {freq} Hz at sample {index} is at or above Nyquist ({nyquist} Hz)")]
    Aliasing { index: usize, freq: f64, nyquist: f64 },

    #[error("missing or stale forward cache: {0}")]
    StaleCache(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

pub type Result<T> = std::result::Result<T, NsfError>;

impl NsfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NsfError::Io {
            path: path.into(),
            source,
        }
    }
}
