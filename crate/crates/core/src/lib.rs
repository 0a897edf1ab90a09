//! Stochastic cell-transmission model of road traffic.
//!
//! The crate covers the exact Markov-chain model (simulated event by event),
//! its Gaussian approximation (fluid trajectory plus covariance ODEs),
//! stationary performance metrics, travel-time distributions, route choice,
//! and a χ² normality-testing pipeline for per-minute flow data.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod flux;
pub mod gaussian;
pub mod model;
pub mod routechoice;
pub mod simulator;
pub mod stationary;
pub mod stats;
pub mod traveltime;
pub mod validation;

pub use error::{Error, Result};
