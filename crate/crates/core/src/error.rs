use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("malformed RIFF/WAVE data: {0}")]
    MalformedWav(String),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedCodec(String),

    #[error("invalid bit depth: {0}")]
    InvalidBitDepth(String),

    #[error("invalid audio buffer: {0}")]
    InvalidAudio(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("loss must be a scalar, got shape {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("optimizer state does not match the parameter set")]
    UninitializedOptimizer,

    #[error("zero-energy signal: {0}")]
    ZeroEnergy(&'static str),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),

    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
