//! Self-supervised pre-training of point-cloud encoders from multi-view
//! renders.
//!
//! Point clouds are rendered into images by a small z-buffer rasterizer,
//! a convolutional image encoder is trained contrastively on the renders,
//! and its features are then distilled into a point-wise 3D encoder through
//! a global (pooled) loss and a pixel-point contrastive loss built from the
//! renderer's exact correspondences.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod numcore;
pub mod pipeline;
pub mod renderer;
pub mod seeding;

pub use error::{Error, Result};
