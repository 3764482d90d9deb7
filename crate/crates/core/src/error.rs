use thiserror::Error;

/// Errors raised by the model, grid, solver and simulation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("degenerate grid axis `{axis}`: {reason}")]
    DegenerateAxis { axis: &'static str, reason: String },

    #[error("expected {expected} gaussian draws, got {got}")]
    DrawCount { expected: usize, got: usize },

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("query {what} = {value} below grid minimum {min}")]
    BelowGrid {
        what: &'static str,
        value: f64,
        min: f64,
    },

    #[error("{stage} did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence {
        stage: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("field/params mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
