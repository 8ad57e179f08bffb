use serde::{Deserialize, Serialize};

/// Numerical tolerances shared by every solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Absolute tolerance on the stationary balance function g(C̄).
    pub root_tol: f64,
    /// Largest accepted sup-norm residual of the stationary equation.
    pub residual_tol: f64,
    /// Largest accepted deviation of the solved measure's mass from one.
    pub mass_tol: f64,
    /// Guaranteed sup-norm error of the value function.
    pub value_tol: f64,
    /// Switching values within this band are treated as indifference.
    pub indifference_tol: f64,
    pub ode_atol: f64,
    pub ode_rtol: f64,
    /// Entries below `-clip_tol` abort integration; smaller undershoots are clipped.
    pub clip_tol: f64,
    pub max_value_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            root_tol: 1e-12,
            residual_tol: 1e-10,
            mass_tol: 1e-8,
            value_tol: 1e-10,
            indifference_tol: 1e-10,
            ode_atol: 1e-10,
            ode_rtol: 1e-8,
            clip_tol: 1e-12,
            max_value_iterations: 100_000,
        }
    }
}
