//! Pixel-level localization of manipulated image regions.
//!
//! Resampling features of 64 image patches are ordered along a Hilbert
//! curve and fed to a stacked LSTM; its per-patch outputs are fused with a
//! residual convolutional encoder and decoded into a two-class per-pixel
//! probability map.

pub mod checkpoint;
pub mod datasynth;
pub mod error;
pub mod features;
pub mod gradsuite;
pub mod hilbert;
pub mod imaging;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
