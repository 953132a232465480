//! Triplane-based LiDAR point-cloud geometry codec.

pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod refinement;
pub mod synth;
pub mod training;
pub mod triplane;

pub use error::{Error, Result};
