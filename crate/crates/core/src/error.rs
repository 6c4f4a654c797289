//! Error taxonomy shared by every module in the engine.
//!
//! Variants map onto the CLI exit-code contract: configuration, file, image
//! and contract failures exit with code 2; numerical aborts exit with 3.

use thiserror::Error;

/// Every fallible operation in the engine returns this error type.
#[derive(Debug, Error)]
pub enum PgeError {
    /// Tensor shape disagreement (dimension mismatch, non-integral conv
    /// output, wrong rank, ...). The message names the offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input outside an operation's mathematical domain (e.g. log of a
    /// non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API precondition that is not a plain shape issue
    /// (non-scalar backward root, hop/weight count mismatch, M < 2, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Requested more items than available (patch count > grid cells,
    /// K > N, ...).
    #[error("capacity error: {0}")]
    Capacity(String),

    /// An index referred outside its container.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Config file or flag rejected (unknown key, unparsable value,
    /// invariant violation).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed image payload; `offset` is the byte position where parsing
    /// failed.
    #[error("image error at byte {offset}: {msg}")]
    Image { offset: usize, msg: String },

    /// Checkpoint file malformed or incompatible with the configured
    /// architecture. The message lists every mismatch found.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Numerical failure: non-finite loss during training, eigensolver
    /// non-convergence, and similar. CLI exit code 3.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PgeError>;
