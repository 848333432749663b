//! Sparse nonvoid voxel segmentation engine.
//!
//! The pipeline turns a dense 3D multi-modal volume into a sparse set of
//! "nonvoid" voxel embeddings (background patches embed to exactly zero and
//! are dropped), runs windowed tri-directional attention and geometric
//! cross-attention over the survivors, and decodes back to a dense per-voxel
//! segmentation. Everything is built on a small f64 tensor engine with
//! reverse-mode autodiff so that the soft occupancy regularizer and the
//! segmentation loss can be trained end to end and checked against finite
//! differences.

pub mod blocks;
pub mod defaults;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nonvoid;
pub mod partition;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
