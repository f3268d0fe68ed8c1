use std::path::PathBuf;

use crate::tokens::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("token id {id} outside vocabulary of size {total}")]
    TokenOutOfRange { id: TokenId, total: u32 },

    #[error("token id {0} is not a text token")]
    UnknownTextId(TokenId),

    #[error("utterance {id}: {reason}")]
    InvalidUtterance { id: String, reason: String },

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("position {position} regresses behind {last} in the {stream} stream")]
    PositionRegression { stream: &'static str, position: usize, last: usize },

    #[error("position {position} exceeds max_positions {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("speech_visible {visible} exceeds cached stream length {cached}")]
    VisibleExceedsCache { visible: usize, cached: usize },

    #[error("attention mask variant {0} is not defined for this layout")]
    MaskVariant(&'static str),

    #[error("non-finite gradient; optimizer step skipped")]
    NonFiniteGradient,

    #[error("layout has no loss-bearing positions")]
    NoLossPositions,

    #[error("smoothing target {0} outside the support")]
    TargetOutsideSupport(TokenId),

    #[error("reference sequence is empty")]
    EmptyReference,

    #[error("decoder already finalized")]
    FeedAfterFinalize,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn utterance(id: &str, reason: impl Into<String>) -> Self {
        Error::InvalidUtterance { id: id.to_string(), reason: reason.into() }
    }
}
