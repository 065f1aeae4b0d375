//! Risk-constrained actor-critic reinforcement learning with generalized
//! one-sided risk measures.

pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod risk;
pub mod shaping;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
