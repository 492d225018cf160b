//! Insert a visual concept from a single image into a latent text-to-image
//! diffusion backbone, then generate, compose and evaluate it.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod image;
pub mod inference;
pub mod latent;
pub mod losses;
pub mod masks;
pub mod mat;
pub mod optim;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};
