//! Joint open-vocabulary affordance detection and language-conditioned
//! 6-DoF pose generation on 3-D point clouds.
//!
//! The pipeline encodes a point cloud into per-point features, correlates
//! them with text embeddings to predict affordance maps, and runs a
//! guided denoising sampler conditioned on the cloud and a label to
//! generate gripper poses. Everything is deterministic given seeds and
//! runs on a single CPU.

pub mod affordance;
pub mod data;
pub mod diffusion;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
