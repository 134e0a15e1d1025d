//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide error enumeration.
///
/// Variants carry enough context to locate the failure (grid node, file,
/// offending parameter) without holding references into solver state.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or solver was handed parameters outside its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A metric lost positive definiteness at a grid node.
    #[error("degenerate metric at node {node:?} (t-index {it}): {detail}")]
    DegenerateMetric {
        /// Spatial multi-index of the offending node.
        node: Vec<usize>,
        /// Index into the t-grid.
        it: usize,
        /// What failed (e.g. Cholesky pivot value).
        detail: String,
    },

    /// A linear solve failed to reach its tolerance or hit a singular pivot.
    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    /// An iteration (Picard/Newton/GMRES outer loop) did not converge.
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    /// Two objects that must live on the same grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// An internal consistency check failed; indicates a bug in the
    /// assembly rather than bad user input.
    #[error("internal consistency check failed: {0}")]
    Internal(String),

    /// File I/O problems.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk data (config JSON, tensor-field container).
    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
