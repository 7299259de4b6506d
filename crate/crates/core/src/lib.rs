//! Flow-based image denoising.
//!
//! An invertible network maps a noisy image to a Gaussian latent. Zeroing a
//! fixed group of latent channels and decoding through the exact inverse
//! yields the clean estimate; resampling that group instead generates new
//! noisy variants.

pub mod conv;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use disentangle::{denoise, sample_noisy, LatentMask};
pub use error::{FdnError, Result};
pub use model::{FlowModel, Gradients, ModelConfig};
pub use objective::LossWeights;
pub use optim::{AdamConfig, AdamState};
pub use rng::Rng;
pub use tensor::Tensor;
