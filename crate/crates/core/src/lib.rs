//! Decentralized stochastic gradient descent with ternary-quantized message
//! exchange, plus tooling to measure its privacy.

pub mod adversary;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod privacy;
pub mod problems;
pub mod quantizer;
pub mod rng;
pub mod schedule;
pub mod topology;
pub mod wire;

pub use error::{Error, Result};
