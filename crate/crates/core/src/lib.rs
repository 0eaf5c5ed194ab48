//! Embodied multimodal chain-of-thought policy at desk scale.

pub mod annotator;
pub mod cli;
pub mod config;
pub mod envsim;
pub mod error;
pub mod inference;
pub mod mot;
pub mod nn;
pub mod primitives;
pub mod tokenstream;
pub mod training;
pub mod util;

pub use error::{Error, Result};
