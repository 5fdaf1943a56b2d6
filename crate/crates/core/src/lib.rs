//! Pricing of variance, volatility, covariance and correlation swaps when
//! volatility is driven by a semi-Markov process.
//!
//! The state `(x_t, gamma(t))`, with `gamma` the backward recurrence time, is
//! Markov. [`generator`] discretizes its generator on a recurrence-time grid,
//! [`moments`] computes the moment curves of realized variance and
//! covariance, and [`pricing`] assembles swap prices from them.
//! [`simulator`] is an independent Monte Carlo oracle.

pub mod error;
pub mod model;
pub mod generator;
pub mod moments;
pub mod pricing;
pub mod simulator;

pub use error::{Error, Result};
