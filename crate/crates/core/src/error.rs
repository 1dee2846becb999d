//! Crate-wide error type and result alias.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed in arguments that violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The two normalization order statistics coincide, so the sample span
    /// is zero and normalized coordinates are undefined.
    #[error("degenerate sample: the normalization order statistics coincide")]
    DegenerateSample,

    /// Point lies outside the support of the distribution.
    #[error("value {x} is outside the distribution support")]
    OutOfSupport { x: f64 },

    /// A shape estimate falls outside the range covered by an increment table.
    #[error("psi_hat = {psi_hat} is outside the table range [{min}, {max}]")]
    OutOfRange { psi_hat: f64, min: f64, max: f64 },

    /// No tail shape maps to the requested normalized level value.
    #[error("no tail shape attains level value {u_target} at T = {t}")]
    NoSolution { u_target: f64, t: f64 },

    /// An iterative routine failed to converge or produced a non-finite value
    /// where a finite one is required.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Validation was asked to reuse the seed the table was built from.
    #[error("validation cloud shares seed {seed} with the build cloud; use a fresh seed")]
    SeedReuse { seed: u64 },

    /// A persisted artifact does not parse or fails its structural checks.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
