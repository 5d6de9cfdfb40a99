//! Simulation engine for studying how privacy-protected census denominators
//! distort small-area disease-rate and health-inequity estimates.

pub mod car;
pub mod das;
pub mod error;
pub mod geo;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod standardize;
pub mod stats;
pub mod tabulation;

pub use error::{Error, Result};
