//! Mamba-based monocular depth estimation engine.
//!
//! The pipeline: a MobileNetV2-style encoder extracts multi-scale features;
//! a pyramid pooling head emits scene logits, adaptive depth bins, and global
//! features; a decoder of four Depth Mamba Blocks fuses depth and image
//! features through selective-scan token mixers; per-pixel bin probabilities
//! against bin centers compose the metric depth map. Training runs on the
//! built-in reverse-mode tensor engine; deployment supports an f32 path and
//! post-training INT8 quantization with an integer execution mode.

pub mod error;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod weights;

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mpsp;
pub mod params;
pub mod quant;

pub use error::{Error, Result};
