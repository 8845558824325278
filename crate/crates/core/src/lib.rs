//! Flexible-patch ViT self-supervised pre-training over multi-resolution
//! image pyramids, with frozen-backbone adaptation heads and an evaluation
//! harness.

pub mod adaptation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod pyramid;
pub mod raster;
pub mod resize;
pub mod rng;

pub use error::{Error, Result};
