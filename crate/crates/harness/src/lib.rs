//! Configuration, dataset generation, two-stage training, evaluation
//! sweeps and BEV rendering around the cooperative perception stack.

pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod train;

pub use config::Config;
pub use error::{HarnessError, Result};
