//! Minimal CPU deep-learning toolkit: tensors, a tape autograd, the layers a
//! small latent-diffusion stack needs, Adam, and a checkpoint container.
//!
//! Heavy kernels (convolution, batched matmul, group norm) split their work
//! per sample with rayon when the `parallel` feature is on. Results are
//! bitwise identical to the sequential path; see [`exec`].

pub mod checkpoint;
pub mod exec;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, ParamGrads, Var};
pub use layers::{Attention, Conv2d, GroupNorm, LayerNorm, Linear};
pub use optim::{ema_update, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
