//! Latent world-model agent with imagined value gradients, confidence-weighted
//! mutual-information bridging, and the training harness around it.

pub mod agent;
pub mod bird;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod worldmodel;

pub use error::{BirdError, CheckpointError, Result};
