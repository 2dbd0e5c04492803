use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes. Both shapes are reported.
    #[error("{op}: shape mismatch, {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A configuration value was rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// A binary or JSON artifact failed validation. `offset` is the byte
    /// offset of the first invalid content where that is meaningful.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// A non-finite value surfaced where the numeric contract forbids it.
    #[error("non-finite value in {op} at entry ({row},{col})")]
    NonFinite {
        op: String,
        row: usize,
        col: usize,
    },

    /// A checkpoint did not match the configuration it was loaded under.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at iteration {iter}: {detail}")]
    Divergence { iter: usize, detail: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: impl std::fmt::Display, right: impl std::fmt::Display) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
