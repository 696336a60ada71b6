use alloc::string::String;
use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("signal too short: {0}")]
    SignalTooShort(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("speaker count mismatch: expected {expected}, got {actual}")]
    SpeakerMismatch { expected: usize, actual: usize },
    #[error(
        "exhaustive permutation search supports at most {limit} speakers, got {speakers}; \
         use the assignment solver instead"
    )]
    TooManySpeakers { speakers: usize, limit: usize },
    #[error("mask kind {0} has no oracle definition")]
    UnsupportedMask(&'static str),
    #[error("source {0} is silent (zero energy)")]
    SilentSource(usize),
    #[error("reference signal has zero energy")]
    ZeroReference,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("corpus too small: {0}")]
    InsufficientCorpus(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
