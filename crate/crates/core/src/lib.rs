//! Simulation of stealthy false-data-injection attacks on DC state
//! estimation, image encoding of the resulting samples, and a from-scratch
//! CNN that detects and localizes the attacked bus.

pub mod attack;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod grid;
pub mod nn;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};
