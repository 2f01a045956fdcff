use thiserror::Error;

/// Failures while evaluating the mass-balance model or its likelihood.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown sub-catchment `{0}`")]
    UnknownCatchment(String),
    #[error("non-finite log-concentration at sub-catchment `{catchment}`")]
    NonFiniteResult { catchment: String },
    #[error("{what}: expected {expected} entries, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
}
