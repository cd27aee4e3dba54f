//! Scenario generation for multi-site renewable power with a
//! Wasserstein GAN and constrained latent-space search.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod forecast;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{CheckpointFault, Error, Result};
