use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration:\n{0}")]
    InvalidConfig(ValidationReport),

    #[error("penalty for sub-population {k} is not convex on the state grid (max slope drop {violation:.3e})")]
    PenaltyNotConvex { k: usize, violation: f64 },

    #[error("policy iteration did not converge at time step {step} (a-index {line}): residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        step: usize,
        line: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error(
        "price fixed point did not converge in {iterations} iterations (last update {last:.3e})"
    )]
    MaxIterations {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("RK4 step too large: embedded error {estimate:.3e} exceeds {tolerance:.1e}")]
    StepTooLarge { estimate: f64, tolerance: f64 },

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{rows} rows exceed the output limit of {limit}")]
    TooManyRows { rows: usize, limit: usize },
}
