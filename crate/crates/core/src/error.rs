use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the harness.
///
/// Every variant maps onto one of the stable process exit codes through
/// [`Error::exit_code`]: 2 for malformed input, 3 for integrity violations,
/// 4 for internal invariant failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid box [{x}, {y}, {w}, {h}]: {reason}")]
    InvalidBox {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },

    #[error("GIoU is undefined when both boxes have zero area")]
    DegenerateBoxes,

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("category {0} has zero annotations; its weight is undefined")]
    ZeroCount(u64),

    #[error("unknown category id {0}")]
    UnknownCategory(u64),

    #[error("no class mapping for category {from_id} of source '{source_name}'")]
    UnmappedCategory { source_name: String, from_id: u64 },

    #[error("namespace collision: source '{0}' appears more than once")]
    NamespaceCollision(String),

    #[error("latency trace has no entry for image {0}")]
    MissingTrace(u64),

    #[error("latency must be positive, got {0}")]
    NonPositiveLatency(f64),

    #[error("frame list is empty")]
    EmptyStream,

    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),

    #[error("internal invariant failed: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Image(_)
            | Error::Malformed(_)
            | Error::InvalidArgument(_)
            | Error::InvalidBox { .. }
            | Error::DegenerateBoxes
            | Error::DimensionMismatch { .. }
            | Error::ZeroCount(_)
            | Error::NonPositiveLatency(_)
            | Error::EmptyStream
            | Error::NonFiniteGradient(_) => 2,
            Error::Integrity(_)
            | Error::UnknownCategory(_)
            | Error::UnmappedCategory { .. }
            | Error::NamespaceCollision(_)
            | Error::MissingTrace(_) => 3,
            Error::Internal(_) => 4,
        }
    }
}
