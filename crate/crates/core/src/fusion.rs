//! Majority-vote fusion of overlapping tile segmentations, and plain
//! concatenation for grids that partition the atlas.
//!
//! Each atlas voxel is voted on only by the tiles that contain it. The fused
//! label is the most frequent vote; ties go to the smallest label, which
//! favours background at uncertain boundaries.
//!
//! Work is split into z planes processed concurrently. Every plane task owns
//! one vote buffer of `num_labels` counters and only resets the entries it
//! touched, so memory stays at one buffer per worker rather than one counter
//! per voxel and label. Planes are independent, so the result does not depend
//! on how they are scheduled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LabelVolume, VolumeGeometry};
use crate::tiling::{CoverageMap, TileGrid};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Majority,
    Concatenate,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(FusionMode::Majority),
            "concat" | "concatenate" => Ok(FusionMode::Concatenate),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub fused: LabelVolume,
    /// Voxels where two or more labels shared the top vote count.
    pub tie_count: usize,
    /// Votes cast per voxel.
    pub coverage_used: CoverageMap,
}

fn validate(
    tile_segs: &[LabelVolume],
    grid: &TileGrid,
    atlas: &VolumeGeometry,
    num_labels: u16,
) -> Result<()> {
    if num_labels < 2 {
        return Err(Error::InvalidLabelCount(num_labels));
    }
    if atlas.dims() != grid.atlas_dims() {
        return Err(Error::GeometryMismatch(format!(
            "atlas dims {:?} differ from grid atlas dims {:?}",
            atlas.dims(),
            grid.atlas_dims()
        )));
    }
    if tile_segs.len() != grid.len() {
        return Err(Error::Fusion(format!(
            "{} tile segmentations for a grid of {} tiles",
            tile_segs.len(),
            grid.len()
        )));
    }
    for (seg, tile) in tile_segs.iter().zip(grid.tiles()) {
        if seg.dims() != tile.size {
            return Err(Error::Fusion(format!(
                "tile {} has dims {:?}, expected {:?}",
                tile.index,
                seg.dims(),
                tile.size
            )));
        }
        if seg.num_labels() > num_labels {
            if let Some(&v) = seg.data().iter().find(|&&v| v >= num_labels) {
                return Err(Error::LabelOutOfRange {
                    value: v as u64,
                    num_labels,
                });
            }
        }
    }
    Ok(())
}

/// For each coordinate along one axis: `(grid position, coordinate inside that tile)`.
fn axis_cover(grid: &TileGrid, axis: usize) -> Vec<Vec<(usize, usize)>> {
    (0..grid.atlas_dims()[axis])
        .map(|c| {
            grid.covering(axis, c)
                .map(|j| (j, c - grid.origins(axis)[j]))
                .collect()
        })
        .collect()
}

/// Fuses overlapping tile outputs into one atlas-space label map by majority vote.
pub fn fuse_majority(
    tile_segs: &[LabelVolume],
    grid: &TileGrid,
    atlas: &VolumeGeometry,
    num_labels: u16,
) -> Result<FusionResult> {
    validate(tile_segs, grid, atlas, num_labels)?;
    let [nx, ny, _] = atlas.dims();
    let [cx, cy, cz] = [0, 1, 2].map(|a| axis_cover(grid, a));
    let [sx, sy, _] = grid.tile_size();
    let mut fused = vec![0u16; atlas.num_voxels()];
    let mut votes = vec![0u32; atlas.num_voxels()];

    let tie_count: usize = fused
        .par_chunks_mut(nx * ny)
        .zip(votes.par_chunks_mut(nx * ny))
        .enumerate()
        .map(|(z, (plane, plane_votes))| {
            let mut counts = vec![0u32; num_labels as usize];
            let mut touched: Vec<u16> = Vec::with_capacity(32);
            let mut ties = 0;
            for y in 0..ny {
                for x in 0..nx {
                    for &(iz, lz) in &cz[z] {
                        for &(iy, ly) in &cy[y] {
                            for &(ix, lx) in &cx[x] {
                                let seg = &tile_segs[grid.tile_index([ix, iy, iz])];
                                let label = seg.data()[lx + sx * (ly + sy * lz)];
                                if counts[label as usize] == 0 {
                                    touched.push(label);
                                }
                                counts[label as usize] += 1;
                            }
                        }
                    }
                    let mut best = 0u16;
                    let mut best_count = 0u32;
                    let mut tied = false;
                    let mut cast = 0;
                    for &l in &touched {
                        let c = counts[l as usize];
                        cast += c;
                        if c > best_count || (c == best_count && l < best) {
                            tied = c == best_count;
                            best = l;
                            best_count = c;
                        } else if c == best_count {
                            tied = true;
                        }
                        counts[l as usize] = 0;
                    }
                    touched.clear();
                    ties += tied as usize;
                    plane[x + nx * y] = best;
                    plane_votes[x + nx * y] = cast;
                }
            }
            ties
        })
        .sum();

    Ok(FusionResult {
        fused: LabelVolume::new(atlas.clone(), fused, num_labels)?,
        tie_count,
        coverage_used: CoverageMap {
            dims: atlas.dims(),
            counts: votes,
        },
    })
}

/// Reassembles a partition grid by copying each voxel from its only tile.
pub fn fuse_concatenate(
    tile_segs: &[LabelVolume],
    grid: &TileGrid,
    atlas: &VolumeGeometry,
) -> Result<LabelVolume> {
    let num_labels = tile_segs
        .iter()
        .map(LabelVolume::num_labels)
        .max()
        .unwrap_or(2);
    validate(tile_segs, grid, atlas, num_labels)?;
    if !grid.is_partition() {
        return Err(Error::Fusion(
            "concatenation requires a non-overlapping partition grid".into(),
        ));
    }
    let mut out = vec![0u16; atlas.num_voxels()];
    for (seg, tile) in tile_segs.iter().zip(grid.tiles()) {
        let [sx, sy, sz] = tile.size;
        for lz in 0..sz {
            for ly in 0..sy {
                let src = &seg.data()[sx * (ly + sy * lz)..][..sx];
                let start =
                    atlas.linear_index(tile.origin[0], tile.origin[1] + ly, tile.origin[2] + lz);
                out[start..start + sx].copy_from_slice(src);
            }
        }
    }
    LabelVolume::new(atlas.clone(), out, num_labels)
}

/// Dispatches on `mode`; concatenation reports zero ties and unit coverage.
pub fn fuse(
    mode: FusionMode,
    tile_segs: &[LabelVolume],
    grid: &TileGrid,
    atlas: &VolumeGeometry,
    num_labels: u16,
) -> Result<FusionResult> {
    match mode {
        FusionMode::Majority => fuse_majority(tile_segs, grid, atlas, num_labels),
        FusionMode::Concatenate => {
            let fused = fuse_concatenate(tile_segs, grid, atlas)?;
            let fused = LabelVolume::new(fused.geometry().clone(), fused.into_data(), num_labels)?;
            Ok(FusionResult {
                fused,
                tie_count: 0,
                coverage_used: grid.coverage_map(),
            })
        }
    }
}
