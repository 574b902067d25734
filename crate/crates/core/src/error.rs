use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BirdError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("training diverged at episode {episode}: {reason}")]
    Divergence { episode: usize, reason: String },

    #[error("unknown environment '{name}' (valid: {valid})")]
    UnknownEnv { name: String, valid: String },

    #[error("episode is done; reset before stepping")]
    EpisodeDone,

    #[error("environment '{0}' does not support rendering")]
    RenderUnsupported(String),

    #[error("replay buffer: {0}")]
    Buffer(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),

    #[error("array '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("array '{0}' missing from checkpoint")]
    MissingArray(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, BirdError>;
