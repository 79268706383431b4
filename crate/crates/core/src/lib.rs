//! Multi-stage Bayesian hierarchical geostatistical model for annual mean
//! pollutant concentrations.

pub mod cli;
pub mod data;
pub mod error;
pub mod hierarchy;
pub mod mcmc;
pub mod output;
pub mod spatial;
pub mod stats;
pub mod synthetic;
pub mod validation;
pub mod variogram;

pub use error::{Error, Result};
