//! Diffusion-backbone feature extraction for semantic segmentation.
//!
//! A frozen convolutional diffusion stack supplies multi-block UNet
//! activations at a configurable noising timestep; a small trainable
//! fully-convolutional head maps those features, stitched over a patch grid,
//! to per-pixel class masks. The crate covers the full loop: synthetic and
//! on-disk datasets, feature extraction with caching, head training,
//! evaluation metrics, hyper-parameter sweeps, and plotting, all behind a
//! CLI.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod grid;
pub mod head;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
