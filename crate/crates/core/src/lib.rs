pub mod bundle;
pub mod cascade;
pub mod classifier;
pub mod config;
pub mod data;
pub mod detectors;
pub mod error;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
