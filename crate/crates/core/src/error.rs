use std::io;

use thiserror::Error;

/// Errors produced anywhere in the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("homography is singular")]
    SingularHomography,
    #[error("point maps to infinity (|w| <= 1e-12)")]
    PointAtInfinity,
    #[error("degenerate correspondences (condition number {0:e})")]
    DegenerateCorrespondences(f64),
    #[error("displaced corners do not form a convex quadrilateral")]
    NonConvexQuad,
    #[error("no convex four-point draw after {0} attempts")]
    SamplingExhausted(usize),

    #[error("GeM exponent must be positive, got {0}")]
    NonPositiveExponent(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("descriptor has zero norm")]
    ZeroNorm,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("forward cache does not belong to the supplied parameters")]
    StaleCache,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("key vector is not unit norm (|d| = {0})")]
    NotUnitNorm(f64),
    #[error("batch of {batch} keys exceeds queue capacity {capacity}")]
    BatchExceedsQueue { batch: usize, capacity: usize },
    #[error("dataset has {size} images, fewer than the batch size {batch}")]
    DatasetTooSmall { size: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("index is empty")]
    EmptyIndex,

    #[error("query has no relevant items")]
    NoRelevantItems,
    #[error("ranking has {len} entries, fewer than {n}")]
    ListTooShort { len: usize, n: usize },
    #[error("patch spec does not fit the scene: {0}")]
    SpecTooLarge(String),
}

impl Error {
    /// Coarse classification used by the command-line front end.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidConfig(_) => ErrorKind::Config,
            Io(_) | MalformedHeader(_) | SizeMismatch { .. } | MalformedFile(_)
            | VersionMismatch { .. } | DuplicateId(_) | EmptyIndex | NoRelevantItems
            | ListTooShort { .. } | SpecTooLarge(_) | DatasetTooSmall { .. }
            | DimensionMismatch { .. } | ShapeMismatch(_) => ErrorKind::Data,
            SingularHomography | PointAtInfinity | DegenerateCorrespondences(_)
            | SamplingExhausted(_) | NonConvexQuad | NonPositiveExponent(_) | ZeroNorm | StaleCache
            | NotUnitNorm(_) | NonFinite(_) | BatchExceedsQueue { .. } => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
