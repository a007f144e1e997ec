use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {constraint}")]
    InvalidParameter {
        name: &'static str,
        constraint: String,
    },

    #[error("potential evaluation overflow at {point:?}")]
    EvaluationOverflow { point: Vec<f64> },

    #[error("stability guard violated: dt·max(γ, √C_V, √C_K) = {value} > {limit}")]
    StabilityGuard { value: f64, limit: f64 },

    #[error("CFL guard violated: {what} = {value} > {limit}")]
    Cfl {
        what: &'static str,
        value: f64,
        limit: f64,
    },

    #[error("non-finite state after step {step}")]
    BlowUp { step: u64 },

    #[error("scheme failure: cell {index} became {value} < -1e-13")]
    NegativeDensity { index: usize, value: f64 },

    #[error("mean-field force unavailable at {point:?}: {reason}")]
    Provider { point: Vec<f64>, reason: String },

    #[error("non-finite exponent at grid value x = {x}")]
    NonFiniteExponent { x: f64 },

    #[error("density has zero total mass")]
    ZeroMass,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("truncated grid too narrow: {0}")]
    Truncation(String),

    #[error("weight matrix not positive definite at node {node:?}")]
    NotPositiveDefinite { node: Vec<f64> },

    #[error("particle {index} at {position:?} lies outside the density grid")]
    OutsideGrid { index: usize, position: Vec<f64> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("fit rejected: {0}")]
    Fit(String),

    #[error("{recipe} / {stage}{}: {source}", iteration_suffix(.iteration))]
    Stage {
        recipe: &'static str,
        stage: &'static str,
        iteration: Option<u64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, constraint: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        constraint: constraint.into(),
    }
}

fn iteration_suffix(it: &Option<u64>) -> String {
    it.map(|i| format!(" at iteration {i}")).unwrap_or_default()
}
