pub mod agent;
pub mod dst;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod preference;
pub mod rng;

pub use error::{Error, Result};
