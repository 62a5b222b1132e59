//! Compositional law parsing with one neural-process latent random function
//! per latent concept.
//!
//! Images are encoded into `|A|` independent concepts; for each concept a
//! function parser aggregates `(concept value, function input)` pairs into a
//! Gaussian global latent, and a target predictor maps that latent plus a new
//! function input back to the concept. A shared decoder turns the predicted
//! concepts into images.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
