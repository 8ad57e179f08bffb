use thiserror::Error;

/// Errors raised by the solvers and the simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A scenario or argument violates a documented invariant.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    /// No sign change of the stationary balance function on the search interval.
    #[error("bracket failure on [{lo}, {hi}]: g(lo) = {g_lo}, g(hi) = {g_hi}")]
    BracketFailure { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },

    #[error("stationary residual {residual:e} exceeds tolerance {tol:e}")]
    ResidualTooLarge { residual: f64, tol: f64 },

    #[error("step size underflow at t = {t}: h = {h:e} (last error ratio {err_ratio:e})")]
    StepSizeUnderflow { t: f64, h: f64, err_ratio: f64 },

    #[error("negative undershoot at t = {t}, n = {index}: {value:e}")]
    NegativeUndershoot { t: f64, index: usize, value: f64 },

    #[error("no convergence after {iterations} iterations (last sup-change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    /// A closed form or certificate is undefined for the given input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A property the theory guarantees failed numerically.
    #[error("certificate violated: {0}")]
    Certificate(String),
}

pub type Result<T> = std::result::Result<T, Error>;
