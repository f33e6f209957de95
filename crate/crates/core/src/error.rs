use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("time grid is not uniform (step {index} has width {width}, expected {expected})")]
    NonUniformGrid {
        index: usize,
        width: f64,
        expected: f64,
    },

    #[error("non-finite value in {what} at step {step} (state {state:?})")]
    NonFinite {
        what: &'static str,
        step: usize,
        state: Vec<f64>,
    },

    #[error("trajectory carries no noise increments")]
    MissingIncrements,

    #[error("fixed-point sweep did not converge after {iterations} iterations (last change {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("residual sampler exhausted {draws} candidate draws; density ratio is degenerate")]
    SamplerExhausted { draws: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
