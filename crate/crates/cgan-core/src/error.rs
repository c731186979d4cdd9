use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite objective at iteration {iteration}: {details}")]
    NonFiniteObjective { iteration: usize, details: String },

    #[error("degenerate weights: no overlap detected")]
    DegenerateWeights,

    #[error("chi-squared divergence infinite: 2/var_p - 1/var_q must be positive")]
    DivergenceInfinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data validation error: {0}")]
    DataValidation(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
