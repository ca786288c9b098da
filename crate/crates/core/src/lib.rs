//! Whole-brain segmentation scaffolding built around spatially localized
//! network tiles.
//!
//! A scan is resampled into a canonical atlas grid, its intensities are
//! harmonized against an atlas reference profile, the atlas grid is covered by
//! overlapping tiles that are segmented independently, and the tile outputs are
//! fused by per-voxel majority vote before being mapped back to the scan's own
//! grid. [`evaluate`] scores results with per-label Dice.
//!
//! Voxel data uses one linear layout everywhere, x fastest:
//! `x + nx * (y + ny * z)`.

pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod geometry;
pub mod harmonize;
pub mod io;
pub mod pipeline;
pub mod segmenter;
pub mod tiling;

pub use error::{Error, Result};
pub use fusion::{fuse_concatenate, fuse_majority, FusionMode, FusionResult};
pub use geometry::{
    atlas_geometry, AffineTransform, IntensityVolume, LabelVolume, Mask, Volume, VolumeGeometry,
};
pub use harmonize::{HarmonizationModel, RegressionFit};
pub use segmenter::Backend;
pub use tiling::{TileGrid, TileSpec};
