use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("cardinality constraint violated: {0}")]
    Cardinality(String),

    #[error("bitwidth {bits} out of range [{min}, {max}]")]
    Bitwidth { bits: u32, min: u32, max: u32 },

    #[error("degenerate factor: {0}")]
    Degenerate(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("divergence at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },

    #[error("bad magic number {found:#010x} in {what} (expected {expected:#010x})")]
    BadMagic {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unexpected end of input while reading {what}")]
    Eof { what: &'static str },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid label {label} at index {index}")]
    BadLabel { index: usize, label: u8 },

    #[error("unsupported container version {0}")]
    Version(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: impl ToString, rhs: impl ToString) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_string(),
        rhs: rhs.to_string(),
    }
}
