//! Error type shared across the crate.
//!
//! Numerical failure (divergence) is separated from caller mistakes
//! (dimension mismatches, bad arguments) and from data-loading problems,
//! so that experiment drivers can retain partial results on divergence
//! while rejecting invalid configurations outright.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two vectors that must share a dimension do not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An input is structurally valid but numerically unusable
    /// (e.g. a zero-norm vector passed to cosine similarity).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A parameter violates its documented range or invariant.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterate or gradient became non-finite.
    #[error("divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    /// The requested computation is not defined for this model or record.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Not enough samples or iterations to compute the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A binary file did not start with the expected magic number.
    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    /// A binary file ended before its header-declared payload.
    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        needed: u64,
        found: u64,
    },

    /// Image and label files disagree on the number of examples.
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: u64, labels: u64 },

    /// A text file failed to parse; location is 1-based.
    #[error("parse error in {path} at row {row}, column {column}: {detail}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        detail: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Construct a divergence error for iteration `n`.
    pub fn divergence(iteration: u64, detail: impl Into<String>) -> Self {
        Error::Divergence {
            iteration,
            detail: detail.into(),
        }
    }

    /// Re-stamp a divergence error with the iteration at which it was
    /// observed; other variants pass through unchanged.
    pub fn at_iteration(self, n: u64) -> Self {
        match self {
            Error::Divergence { detail, .. } => Error::Divergence {
                iteration: n,
                detail,
            },
            other => other,
        }
    }

    /// True for the divergence variant.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_iteration_restamps_divergence_only() {
        let e = Error::divergence(0, "grad overflow").at_iteration(42);
        match e {
            Error::Divergence { iteration, .. } => assert_eq!(iteration, 42),
            _ => panic!("wrong variant"),
        }

        let e = Error::InvalidArgument("x".into()).at_iteration(42);
        assert!(matches!(e, Error::InvalidArgument(_)));
    }

    #[test]
    fn display_includes_location() {
        let e = Error::DimensionMismatch {
            expected: 3,
            got: 2,
        };
        assert_eq!(e.to_string(), "dimension mismatch: expected 3, got 2");
    }
}
