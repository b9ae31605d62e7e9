//! Simulation and policy-comparison engine for a dynamically regulated
//! emissions-allowance market.
//!
//! Firms choose abatement α and trade rate β against an allowance price P;
//! the regulator picks the allocation process. The crate provides the
//! closed-form best responses and equilibrium prices, the optimal and
//! benchmark allocation policies, and Monte Carlo cost estimates.

pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod params;
pub mod policies;
pub mod firm;
pub mod stochastic;

pub use error::{Error, Result};
