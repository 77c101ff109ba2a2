use thiserror::Error;

/// Every failure the toolkit can report.
///
/// Variant names double as the machine-readable error codes printed by the
/// command line front end, so renaming one is a breaking change.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("integer envelope exceeded in {0}")]
    NumericOverflow(&'static str),
    #[error("inexact division: remainder {remainder} at element {index}")]
    InexactDivision { index: usize, remainder: i64 },
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("dropout requires the cover image")]
    MissingCover,
    #[error("value {0} outside the serializable range")]
    RangeExceeded(i64),
    #[error("checksum mismatch: stored {stored:#06x}, computed {computed:#06x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("bitstream truncated")]
    TruncatedStream,
    #[error("capacity exceeded: {required} bits required, {available} available")]
    CapacityExceeded { required: usize, available: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("overflow map entry at {0} sits on a non-saturated pixel")]
    InconsistentMap(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier used in CLI diagnostics and CSV error columns.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DivisionByZero => "DivisionByZero",
            Error::NonFiniteInput(_) => "NonFiniteInput",
            Error::NonScalarLoss(_) => "NonScalarLoss",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NumericOverflow(_) => "NumericOverflow",
            Error::InexactDivision { .. } => "InexactDivision",
            Error::BadParams(_) => "BadParams",
            Error::MissingCover => "MissingCover",
            Error::RangeExceeded(_) => "RangeExceeded",
            Error::ChecksumMismatch { .. } => "ChecksumMismatch",
            Error::TruncatedStream => "TruncatedStream",
            Error::CapacityExceeded { .. } => "CapacityExceeded",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::InconsistentMap(_) => "InconsistentMap",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Config(_) => "Config",
            Error::Image(_) => "Image",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
