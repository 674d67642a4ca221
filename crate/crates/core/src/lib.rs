//! Structural pruning and recovery for a toy multimodal decoder.

pub mod accounting;
pub mod advisor;
pub mod config;
pub mod error;
pub mod eval;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod recovery;
pub mod rng;
pub mod workflow;

pub use error::{Error, Result};
