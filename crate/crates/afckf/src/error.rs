use thiserror::Error;

/// Failures surfaced by the filter operations.
///
/// Filter steps are all-or-nothing: when a step returns an error the caller's
/// state, window, and adaptive estimates are untouched, so a failed epoch can
/// be skipped by holding the previous posterior.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    /// Covariance could not be factored even after the maximum diagonal jitter.
    #[error("covariance is not positive semidefinite (min eigenvalue {min_eig:.3e} after jitter {jitter:.0e})")]
    NonPsd { min_eig: f64, jitter: f64 },

    /// Innovation covariance is not invertible to working precision.
    #[error("innovation covariance is singular to working precision")]
    Singular,

    /// Range-bearing measurement is undefined at the sensor origin.
    #[error("state within {eps:.0e} of the sensor origin: range-bearing undefined")]
    AtOrigin { eps: f64 },

    /// A matrix or vector had a shape the operation cannot accept.
    #[error("dimension mismatch in {context}")]
    DimensionMismatch { context: &'static str },
    #[error("non-finite values in {context}")]
    NonFinite { context: &'static str },

    /// The sliding window holds too few samples for the requested estimate.
    #[error("window holds {got} samples, need at least {need}")]
    WindowTooShort { need: usize, got: usize },
}
