//! Equilibrium information percolation: stationary precision measures, optimal
//! search effort, trigger equilibria, interventions, and a Monte Carlo simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod best_response;
pub mod config;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod interventions;
pub mod model;
pub mod root;
pub mod simulator;
pub mod stationary;

pub use config::SolverConfig;
pub use error::{Error, Result};
pub use model::{CostSpec, ModelParams, Policy, PrecisionMeasure, ValueFunction};
pub use stationary::MarketState;
