//! Anatomical landmark localization with patch-based fully convolutional
//! networks.
//!
//! A global network predicts, for every cell of a coarse output grid, a
//! displacement vector to each landmark and the probability that the landmark
//! lies inside the cell. Landmark positions are the probability-weighted
//! average of the points the displacements point to. Specialized local
//! networks then refine each estimate on a small crop around it.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod localize;
pub mod model;
pub mod sampling;
pub mod targets;
pub mod train;

pub use domain::{build_grid, vox_to_mm, Image, LandmarkSet, PatchGrid, PredictionField};
pub use error::{Error, Result};
