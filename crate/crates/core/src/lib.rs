//! Refinement of photogrammetric digital surface models with a residual
//! encoder-decoder network, trained on an L1 image loss, weight and activity
//! regularisers and a perceptual feature loss.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
