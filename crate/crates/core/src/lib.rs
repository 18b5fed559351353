//! Segmentation of deforming 3D Gaussian scenes.
//!
//! The crate renders per-Gaussian payloads (colors, identity encodings,
//! point masks) by alpha compositing, trains a temporal identity field from
//! per-frame object masks, refines the resulting per-timestamp
//! segmentations into an identity table, and edits scenes at the object
//! level. Synthetic scenes with exact per-Gaussian ground truth drive the
//! tests and examples.

pub mod bench;
pub mod cli;
pub mod config;
pub mod deformation;
pub mod editing;
pub mod error;
pub mod eval;
pub mod field;
pub mod images;
pub mod knn;
pub mod losses;
pub mod pipeline;
pub mod scene;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
