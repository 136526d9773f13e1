use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch between operands.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Math domain violation (log of nonpositive, division by zero, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (odd head dim, infeasible generator spec, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Index outside a declared bound (visit index past the table, overlong sequence).
    #[error("range error: {0}")]
    Range(String),

    /// An API precondition was violated (non-scalar backward root, bad index sequence).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite value where one is not allowed (NaN loss, exploding logits).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A statistic is undefined on the given data (single-class AUROC, empty TP group).
    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    /// Malformed input data (bad JSONL line, unreadable date).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 input/config, 3 numeric, 4 degenerate stats.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Degenerate(_) => 4,
            _ => 2,
        }
    }
}
