pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod features;
pub mod him;
pub mod human;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod object;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
