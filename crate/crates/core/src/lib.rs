pub mod classifier;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod degradation;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
pub use image::Image;
