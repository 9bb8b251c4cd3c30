//! Structural latent pretraining on point clouds: a differentiable feature
//! Gaussian-splatting renderer supervising a point-cloud autoencoder with a
//! point-wise latent VAE.

pub mod checks;
pub mod codec;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plvae;
pub mod rasterizer;

pub use error::{Error, Result};
