//! Unsupervised landmark discovery on top of dense feature backbones.
//!
//! The crate covers the whole pipeline: a zero-shot clustering baseline,
//! self-supervised keypoint bootstrapping, clustering-driven self-training,
//! a pose-aware variant with a VAE proxy task and two-stage clustering, and
//! the evaluation protocol used to score discovered landmarks against
//! ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod bootstrap;
pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pose_proxy;
pub mod selftrain;
pub mod tape;

pub use error::{Result, UldError};
