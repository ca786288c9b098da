//! Decomposition of the atlas grid into axis-aligned tiles.
//!
//! Along each axis with `k >= 2` tiles of extent `d` over a grid of extent
//! `n`, origins are spaced evenly: `origin_j = round(j * (n - d) / (k - 1))`,
//! with ties rounded to even. Tiles are listed with x varying fastest, then y, then z,
//! so tile `n = ix + kx * (iy + ky * iz)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{IntensityVolume, Volume, VolumeGeometry, ATLAS_DIMS};

/// Network input size used by the 27-tile configuration.
pub const SLANT27_TILE_SIZE: [usize; 3] = [96, 128, 88];

/// One sub-box of the atlas grid: voxels `origin .. origin + size` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub index: usize,
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl TileSpec {
    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| v[a] >= self.origin[a] && v[a] < self.origin[a] + self.size[a])
    }

    pub fn num_voxels(&self) -> usize {
        self.size.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridDoc")]
pub struct TileGrid {
    atlas_dims: [usize; 3],
    grid: [usize; 3],
    tile_size: [usize; 3],
    /// Per-axis origin lists.
    origins: [Vec<usize>; 3],
    tiles: Vec<TileSpec>,
}

#[derive(Deserialize)]
struct GridDoc {
    atlas_dims: [usize; 3],
    grid: [usize; 3],
    tile_size: [usize; 3],
    origins: [Vec<usize>; 3],
    tiles: Vec<TileSpec>,
}

impl TryFrom<GridDoc> for TileGrid {
    type Error = Error;

    /// Rebuilds the grid and rejects documents whose explicit origins or
    /// tile list disagree with it.
    fn try_from(doc: GridDoc) -> Result<Self> {
        let grid = TileGrid::build(doc.atlas_dims, doc.grid, doc.tile_size)?;
        if grid.origins != doc.origins || grid.tiles != doc.tiles {
            return Err(Error::Tiling(
                "tile list does not match the grid parameters".into(),
            ));
        }
        Ok(grid)
    }
}

/// `num / den` rounded to nearest, ties to even, which keeps origin lists
/// mirror-symmetric whenever the free span is even.
fn round_ratio(num: usize, den: usize) -> usize {
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

fn axis_origins(axis: usize, extent: usize, k: usize, d: usize) -> Result<Vec<usize>> {
    if k == 0 || d == 0 {
        return Err(Error::Tiling(format!(
            "axis {axis}: tile count and size must be positive"
        )));
    }
    if d > extent {
        return Err(Error::Tiling(format!(
            "axis {axis}: tile size {d} exceeds extent {extent}"
        )));
    }
    if k == 1 {
        if d < extent {
            return Err(Error::Tiling(format!(
                "axis {axis}: a single tile of size {d} cannot cover extent {extent}"
            )));
        }
        return Ok(vec![0]);
    }
    if k * d < extent {
        return Err(Error::Tiling(format!(
            "axis {axis}: {k} tiles of size {d} cannot cover extent {extent}"
        )));
    }
    let span = extent - d;
    let origins: Vec<usize> = (0..k).map(|j| round_ratio(j * span, k - 1)).collect();
    for w in origins.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Tiling(format!(
                "axis {axis}: {k} tiles of size {d} over extent {extent} give coincident origins"
            )));
        }
        if w[1] > w[0] + d {
            return Err(Error::Tiling(format!(
                "axis {axis}: gap between tiles at {} and {}",
                w[0], w[1]
            )));
        }
    }
    Ok(origins)
}

impl TileGrid {
    pub fn build(atlas_dims: [usize; 3], grid: [usize; 3], tile_size: [usize; 3]) -> Result<Self> {
        let origins = [
            axis_origins(0, atlas_dims[0], grid[0], tile_size[0])?,
            axis_origins(1, atlas_dims[1], grid[1], tile_size[1])?,
            axis_origins(2, atlas_dims[2], grid[2], tile_size[2])?,
        ];
        let mut tiles = Vec::with_capacity(grid.iter().product());
        for &oz in &origins[2] {
            for &oy in &origins[1] {
                for &ox in &origins[0] {
                    tiles.push(TileSpec {
                        index: tiles.len(),
                        origin: [ox, oy, oz],
                        size: tile_size,
                    });
                }
            }
        }
        Ok(TileGrid {
            atlas_dims,
            grid,
            tile_size,
            origins,
            tiles,
        })
    }

    /// 3x3x3 overlapped tiles of 96x128x88 on the atlas grid.
    pub fn slant27() -> Self {
        Self::build(ATLAS_DIMS, [3, 3, 3], SLANT27_TILE_SIZE).expect("constant grid is valid")
    }

    /// 2x2x2 partition of the atlas grid with tiles of `ceil(extent / 2)`.
    pub fn slant8() -> Self {
        Self::partition(ATLAS_DIMS, [2, 2, 2]).expect("constant grid is valid")
    }

    /// A non-overlapped partition; each extent must divide evenly by its tile count.
    pub fn partition(atlas_dims: [usize; 3], grid: [usize; 3]) -> Result<Self> {
        let mut size = [0; 3];
        for a in 0..3 {
            if grid[a] == 0 || !atlas_dims[a].is_multiple_of(grid[a]) {
                return Err(Error::Tiling(format!(
                    "axis {a}: extent {} does not split into {} equal tiles",
                    atlas_dims[a], grid[a]
                )));
            }
            size[a] = atlas_dims[a].div_ceil(grid[a]);
        }
        Self::build(atlas_dims, grid, size)
    }

    pub fn atlas_dims(&self) -> [usize; 3] {
        self.atlas_dims
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn tile_size(&self) -> [usize; 3] {
        self.tile_size
    }

    pub fn origins(&self, axis: usize) -> &[usize] {
        &self.origins[axis]
    }

    pub fn tiles(&self) -> &[TileSpec] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Grid positions along `axis` of the tiles covering voxel coordinate `c`.
    pub fn covering(&self, axis: usize, c: usize) -> impl Iterator<Item = usize> + '_ {
        let d = self.tile_size[axis];
        self.origins[axis]
            .iter()
            .enumerate()
            .filter(move |(_, &o)| c >= o && c < o + d)
            .map(|(j, _)| j)
    }

    /// Tile index from per-axis grid positions.
    pub fn tile_index(&self, pos: [usize; 3]) -> usize {
        pos[0] + self.grid[0] * (pos[1] + self.grid[1] * pos[2])
    }

    /// Per-axis coverage counts; the 3D coverage is their outer product.
    fn axis_counts(&self, axis: usize) -> Vec<u32> {
        let mut counts = vec![0u32; self.atlas_dims[axis]];
        for &o in &self.origins[axis] {
            for c in &mut counts[o..o + self.tile_size[axis]] {
                *c += 1;
            }
        }
        counts
    }

    /// True when every atlas voxel belongs to exactly one tile.
    pub fn is_partition(&self) -> bool {
        (0..3).all(|a| self.axis_counts(a).iter().all(|&c| c == 1))
    }

    pub fn coverage_map(&self) -> CoverageMap {
        let [cx, cy, cz] = [0, 1, 2].map(|a| self.axis_counts(a));
        let mut counts = Vec::with_capacity(cx.len() * cy.len() * cz.len());
        for &z in &cz {
            for &y in &cy {
                counts.extend(cx.iter().map(|&x| x * y * z));
            }
        }
        CoverageMap {
            dims: self.atlas_dims,
            counts,
        }
    }

    pub fn summary(&self) -> GridSummary {
        let cov = self.coverage_map();
        GridSummary {
            atlas_dims: self.atlas_dims,
            grid: self.grid,
            tile_size: self.tile_size,
            tiles: self.len(),
            origins: self.origins.clone(),
            partition: self.is_partition(),
            coverage: cov.stats(),
        }
    }
}

/// Number of tiles containing each atlas voxel, in the crate's linear layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    pub dims: [usize; 3],
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub min: u32,
    pub max: u32,
    pub mean: f64,
    /// Voxels covered by at least three tiles, where a single wrong tile is outvoted.
    pub voxels_ge3: usize,
}

impl CoverageMap {
    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.counts[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn stats(&self) -> CoverageStats {
        let min = self.counts.iter().copied().min().unwrap_or(0);
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        CoverageStats {
            min,
            max,
            mean: total as f64 / self.counts.len().max(1) as f64,
            voxels_ge3: self.counts.iter().filter(|&&c| c >= 3).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub atlas_dims: [usize; 3],
    pub grid: [usize; 3],
    pub tile_size: [usize; 3],
    pub tiles: usize,
    pub origins: [Vec<usize>; 3],
    pub partition: bool,
    pub coverage: CoverageStats,
}

/// Sub-volume under `tile`, with geometry shifted so world coordinates are kept.
pub fn extract_tile(vol: &IntensityVolume, tile: &TileSpec) -> Result<IntensityVolume> {
    vol.extract(tile.origin, tile.size)
}

pub fn extract_tile_of<T: crate::geometry::Voxel>(
    vol: &Volume<T>,
    tile: &TileSpec,
) -> Result<Volume<T>> {
    vol.extract(tile.origin, tile.size)
}

/// Geometry of `tile` inside `atlas`.
pub fn tile_geometry(atlas: &VolumeGeometry, tile: &TileSpec) -> Result<VolumeGeometry> {
    atlas.sub_grid(tile.origin, tile.size)
}
