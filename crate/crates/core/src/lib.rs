//! Patch-disagreement quality control for dynamic (2D+time) segmentation.
//!
//! Overlapping spatiotemporal patches are segmented independently, fused by
//! averaging, and the across-patch spread of probabilities becomes a
//! space-time uncertainty map. Per-frame and per-slice scores derived from
//! that map rank frames for budgeted expert review.

pub mod backends;
pub mod connectivity;
pub mod dqc;
pub mod error;
pub mod experiments;
pub mod hitl;
pub mod patching;
pub mod phantom;
pub mod render;
pub mod rle;
pub mod seed;
pub mod stats;
pub mod volumes;

pub use error::{Error, Result};
pub use volumes::{Dims, DynamicVolume, SegmentationMask, SliceRecord, VolumeKind};
