//! Moment-level pipeline for measurement-based LQG control of linear quantum
//! memories: filtering and initial-point smoothing Riccati equations, the
//! backward control Riccati equation, closed-loop second moments and cost, and
//! a classical Monte Carlo surrogate for cross-checking.

pub mod closedloop;
pub mod control;
pub mod error;
pub mod filtering;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod ode;
pub mod scenarios;

pub use error::{Error, Result};
