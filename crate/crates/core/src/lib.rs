//! Caption-conditioned latent diffusion for unsupervised anomaly detection.

pub mod autoencoder;
pub mod captioner;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod segmentation;
pub mod text_encoder;
pub mod util;

pub use error::{Error, Result};
