//! Semantic segmentation masks from text-to-image diffusion attention.
//!
//! The pipeline reads per-layer, per-timestep attention dumps ([`store`]),
//! averages and refines them ([`attention`]), thresholds the result into
//! masks with an uncertainty band ([`mask`]) and scores masks against ground
//! truth ([`eval`]). [`prompt`] builds the generation prompts and
//! [`fixtures`] fabricates synthetic scenes with known answers.

pub mod attention;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod mask;
pub mod matrix;
pub mod pipeline;
pub mod prompt;
pub mod store;

pub use error::{Error, Result};

/// Class identifier as stored in masks. `0` is background.
pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;
/// Mask value for pixels whose label is uncertain.
pub const UNCERTAIN: ClassId = 255;
