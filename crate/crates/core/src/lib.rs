//! Desk-scale simulator and learning pipeline for environment-aware wireless links.
//!
//! The crate covers the full chain: synthetic urban scenes, an image-method ray
//! tracer producing MIMO channel matrices, environment sensing (label maps, ROI
//! semantics, grid descriptors), a small reverse-mode autodiff engine, an
//! attention-fusion transformer regressor from environment features to channel
//! matrices (the channel knowledge base, CKB), and a CKB-driven joint
//! source-channel coding image link with PSNR/SSIM evaluation.

pub mod ckb;
pub mod config;
pub mod corpus;
pub mod datastore;
pub mod envsense;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod jscc;
pub mod metrics;
pub mod pipeline;
pub mod raytrace;
pub mod scene;
pub mod tensorkit;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
