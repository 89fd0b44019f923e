//! Recovery of missing slices in voxelized crystal-orientation volumes.
//!
//! The crate provides the full pipeline: a dense-tensor engine with reverse
//! mode automatic differentiation, orientation conversions between Euler
//! angles and cubochoric coordinates, voxel-volume processing (grain
//! segmentation, boundary extraction, normalization), a synthetic
//! polycrystal generator, an axial-attention transformer with a boundary
//! masked regression loss, a self-supervised training loop, nearest-neighbor
//! projection recovery with voting and copy baselines, and an evaluation
//! harness producing accuracy and improvement reports.

pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod orientation;
pub mod recovery;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod tensor;
pub mod training;
pub mod volume;

pub use tensor::{Tensor, TensorError};
