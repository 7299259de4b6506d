//! Image I/O, patch datasets and synthetic data.

pub mod dataset;
pub mod pnm;
pub mod synth;

pub use dataset::{add_awgn, AugPolicy, CropPolicy, PatchDataset, SigmaPolicy};
pub use pnm::{load_image, save_image};
