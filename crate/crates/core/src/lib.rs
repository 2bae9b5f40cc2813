//! Dense contrastive pretraining on panoramic street scenes, at CPU scale.
//!
//! The crate bundles four things that are usually scattered across a training
//! repo, an eval toolkit and a notebook:
//!
//! - [`viewgeom`]: paired random view sampling with photometric augmentation,
//!   and the cross-view cell correspondence (positives/negatives) measured in
//!   source-image coordinates.
//! - [`contrastive`]: the spatial contrastive loss, similarity-weighted
//!   feature smoothing, the global propagation loss and their additive
//!   combination, each with exact analytic gradients.
//! - [`encoder`]: a small convolutional backbone with a projection head,
//!   full backward passes, a momentum twin updated by exponential moving
//!   average, SGD/LARS optimizers with step and cosine-restart schedules,
//!   checkpointing, and the pretraining loop.
//! - [`panoptic`] and [`panorama`]: a Panoptic Quality evaluator over
//!   16-bit panoptic rasters, equirectangular field-of-view cropping with
//!   wraparound, a FoV sweep harness and a procedural synthetic panorama
//!   generator for end-to-end runs.
//!
//! Everything is `f64`, single-threaded by default and deterministic under an
//! explicit seed.

pub mod analysis;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod io;
pub mod panoptic;
pub mod panorama;
pub mod viewgeom;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
