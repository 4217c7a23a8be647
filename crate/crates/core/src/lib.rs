//! Simulation of a machine-learning data market.
//!
//! An arbiter spends a consumer's budget of oracle accesses by adaptively
//! sampling data providers with online stochastic mirror descent on a
//! clipped simplex, and pays providers in proportion to how often they were
//! accessed. The crate also carries the instrumentation used to judge the
//! sampler: a switching-regret comparator, per-round Shapley baselines and a
//! seeded experiment runner that writes CSV/JSON artifacts.

pub mod baselines;
pub mod cli;
pub mod clipped_simplex;
pub mod error;
pub mod market;
pub mod regret;
pub mod rng;
pub mod sampler;
pub mod scenarios;

pub use error::{Error, Result};
