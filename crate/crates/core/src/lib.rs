//! Equal-length pair training for small tabular policies.

pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lab;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod trainer;
pub mod types;

pub use error::{EqlenError, Result};
