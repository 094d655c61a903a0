use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty histogram")]
    EmptyHistogram,

    #[error("patch out of slide bounds: {0}")]
    OutOfBounds(String),

    #[error("slide mismatch: mask for {mask} applied to slide {slide}")]
    SlideMismatch { mask: String, slide: String },

    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),

    #[error("dim too small: {0} < 8")]
    DimTooSmall(usize),

    /// Connection-level failure talking to a remote service; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("server error (HTTP {status}): {message}")]
    Server { status: u16, message: String },

    #[error("mixed dimensions: {first} and {other}")]
    MixedDimensions { first: usize, other: usize },

    #[error("duplicate key: {0}")]
    DuplicateKey(String),

    #[error("corrupt or incompatible index: {0}")]
    CorruptIndex(String),

    #[error("unexpected EOF")]
    UnexpectedEof,

    #[error("empty seed set")]
    EmptySeedSet,

    #[error("seed not in index: {0}")]
    SeedNotIndexed(String),

    #[error("unknown queue: {0}")]
    UnknownQueue(String),

    #[error("unknown candidate: {0}")]
    UnknownCandidate(String),

    #[error("malformed verdict: {0}")]
    MalformedVerdict(String),

    #[error("slide not found: {0}")]
    SlideNotFound(String),

    #[error("class conflict: {0}")]
    ClassConflict(String),

    #[error("cannot split: {0}")]
    CannotSplit(String),

    #[error("too many tokens: {tokens} exceeds max_positions {max}")]
    TooManyTokens { tokens: usize, max: usize },

    #[error("backward without recorded forward")]
    NoRecordedForward,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("missing embedding: {0}")]
    MissingEmbedding(String),

    #[error("class-list mismatch: {0}")]
    ClassListMismatch(String),

    #[error("missing palette entry for class {0}")]
    MissingPalette(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}
