//! Part-aware latent diffusion for labeled point clouds, and generative data
//! augmentation for semi-supervised part segmentation built on it.

pub mod error;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod geometry;
pub mod latent_prior;
pub mod pipeline;
pub mod segmentation;
pub mod vae;

pub use error::{Error, Result};
pub use partgda_tape as tape;
