use thiserror::Error;

/// Errors produced by the reconstruction toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrimError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("rank {requested} out of range (allowed 1..={max}) in {context}")]
    RankOutOfRange {
        context: &'static str,
        requested: usize,
        max: usize,
    },

    #[error("{0}")]
    Undefined(String),

    #[error("matrix is singular or too ill-conditioned: {0}")]
    Singular(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for OrimError {
    fn from(e: std::io::Error) -> Self {
        OrimError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, OrimError>;

pub(crate) fn check_dims(context: &'static str, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(OrimError::DimensionMismatch {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        });
    }
    Ok(())
}
