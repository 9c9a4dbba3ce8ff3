use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {point:?} lies outside the chart domain")]
    Domain { point: Vec<f64> },

    #[error("trajectory left the chart domain at t = {time}")]
    DomainExit { time: f64 },

    #[error("metric is singular or indefinite at {point:?}")]
    SingularMetric { point: Vec<f64> },

    #[error("energy drift {drift:e} exceeds {limit:e}; reduce the step size")]
    EnergyDrift { drift: f64, limit: f64 },

    #[error("frame orthonormality drift {drift:e} exceeds {limit:e}")]
    FrameDrift { drift: f64, limit: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("fermi chart is not injective: parameters {first:?} and {second:?} map to the same point")]
    ChartNotInjective { first: Vec<f64>, second: Vec<f64> },

    #[error("time {time} outside the curve grid [{start}, {end}]")]
    OutsideGrid { time: f64, start: f64, end: f64 },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("matrix is not hyperbolic: {0}")]
    NotHyperbolic(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("target at distance {distance:e} exceeds the admissible radius {budget:e}")]
    OutsideBudget { distance: f64, budget: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
