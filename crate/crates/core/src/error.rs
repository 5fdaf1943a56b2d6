use thiserror::Error;

/// Errors raised by model construction, numerics and simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("survival {survival:e} at t = {t} is below the floor; truncate the recurrence grid earlier")]
    SurvivalUnderflow { t: f64, survival: f64 },

    #[error("sojourn law of state {state} has no density and cannot enter the generator")]
    NoDensity { state: usize },

    #[error("state {state}: survival {survival:e} at gamma_max = {gamma_max} is not below 1e-6")]
    Truncation {
        state: usize,
        gamma_max: f64,
        survival: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("propagation left the admissible range: value {value:e} outside [{lower:e}, {upper:e}]")]
    PositivityBreach { value: f64, lower: f64, upper: f64 },

    #[error("dense exponential requested for {n} nodes (limit {limit})")]
    DimensionTooLarge { n: usize, limit: usize },

    #[error("variance of realized variance is negative: {0:e}")]
    NegativeVariance(f64),

    #[error("expected realized variance {0:e} is too small for the requested expansion")]
    DegenerateMean(f64),

    #[error("constant-volatility normalization self-test deviates by {0:e}")]
    NormalizationCheckFailed(f64),

    #[error("path exploded: more than {0} jumps before the horizon")]
    PathExplosion(usize),

    #[error("correlation {0} outside [-1, 1]")]
    CorrelationOutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
