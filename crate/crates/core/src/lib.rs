//! Pareto/NBD customer-base analysis: RFM summaries, an MCMC estimator of
//! individual purchase and dropout rates, and a small neural network trained
//! on likelihood-embedded losses that estimates the same rates for customers
//! the sampler never saw.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gibbs;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predict;
pub mod slice;
pub mod synthetic;

pub use error::{Error, Result};
