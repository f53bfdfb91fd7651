use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (invalid action, bad index,
    /// mismatched parameter sets, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Array shapes incompatible for the requested operation.
    #[error("shape mismatch in {op}: ({a_rows}x{a_cols}) vs ({b_rows}x{b_cols})")]
    Shape {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },

    /// Domain error (empty task set, non-positive sizes, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Task-set generation could not satisfy the requested configuration.
    #[error("generation error: {0}")]
    Generation(String),

    /// File parse error with location context.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    /// Non-finite value detected during a forward/backward pass.
    #[error("non-finite value detected at {0}")]
    NonFinite(String),

    /// Training loss diverged.
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
