//! Multi-view aggregation network for high-resolution dichotomous image
//! segmentation, built on a small reverse-mode autodiff engine over `f64`
//! tensors.
//!
//! An image is split into a downsampled distant view and a grid of close-up
//! crops. All views share one encoder; a localization module lets the
//! distant view attend to pooled close-up tokens, refinement modules at every
//! decoder level exchange information in the other direction, and a
//! rearrangement head stitches the close-ups back into a full-resolution map.
//!
//! With the default `parallel` feature, per-image and per-batch loops fan out
//! over rayon; without it the same code runs sequentially.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod kernels;
pub mod losses;
pub mod mclm;
pub mod mcrm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod view_geometry;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, MvaNet, ViewMode};
pub use tensor::Tensor;
