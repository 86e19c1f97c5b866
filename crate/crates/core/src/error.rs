use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,

    #[error("unsupported primitive pair: {0}")]
    UnsupportedPair(String),

    #[error("derivative cache is stale")]
    StaleCache,

    #[error("hessian diagonal entry {index} is not positive ({value})")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("pivot block {block} is not positive definite")]
    NotPositiveDefinite { block: usize },

    #[error("constraint schur complement is singular: {0}")]
    SingularSchur(String),

    #[error("simulation diverged at t = {time:.4} s")]
    SimulationDiverged { time: f64 },

    #[error("scenario error: {0}")]
    Scenario(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}
