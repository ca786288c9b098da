//! Volumes, affine transforms and resampling between grids.
//!
//! All voxel data is stored in a single linear layout with the x axis varying
//! fastest: `linear = x + nx * (y + ny * z)`. Tiling and fusion index
//! arithmetic relies on this layout.
//!
//! Resampling uses the pull-back convention: every target voxel is mapped
//! through `transform` (target world -> source world) and then into the
//! source's continuous index space, where it is interpolated.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Determinant threshold below which the linear part of an affine counts as singular.
pub const SINGULAR_EPS: f64 = 1e-12;

/// Continuous indices closer than this to an integer are snapped onto it,
/// so that transforms which are exact in theory stay exact after round-off.
const SNAP_EPS: f64 = 1e-6;

/// Dimensions of the canonical atlas grid, 1 mm isotropic.
pub const ATLAS_DIMS: [usize; 3] = [172, 220, 156];

/// 4x4 homogeneous transform with an exact `[0, 0, 0, 1]` last row and an
/// invertible linear part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAffine("non-finite entry".into()));
        }
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidAffine(format!(
                "last row must be [0, 0, 0, 1], got [{}, {}, {}, {}]",
                last[0], last[1], last[2], last[3]
            )));
        }
        let det = matrix.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() <= SINGULAR_EPS {
            return Err(Error::SingularTransform { det });
        }
        Ok(AffineTransform { matrix })
    }

    /// Builds a transform from the top three rows (row-major, 3x4).
    pub fn from_rows(rows: [[f64; 4]; 3]) -> Result<Self> {
        let mut m = Matrix4::identity();
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        Self::from_matrix(m)
    }

    pub fn translation(offset: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, 3)] = offset[a];
        }
        AffineTransform { matrix: m }
    }

    /// Axis-aligned scaling. Panics on a zero factor.
    pub fn scaling(factors: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = factors[a];
        }
        Self::from_matrix(m).expect("scaling factors must be nonzero")
    }

    /// Rotation about one axis (0 = x, 1 = y, 2 = z) by `radians`.
    pub fn rotation(axis: usize, radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        let (i, j) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            2 => (0, 1),
            _ => panic!("rotation axis must be 0, 1 or 2"),
        };
        let mut m = Matrix4::identity();
        m[(i, i)] = c;
        m[(i, j)] = -s;
        m[(j, i)] = s;
        m[(j, j)] = c;
        AffineTransform { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [
            self.matrix[(0, 3)],
            self.matrix[(1, 3)],
            self.matrix[(2, 3)],
        ]
    }

    /// Matrix product `self * other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let mut m = self.matrix * other.matrix;
        m.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        AffineTransform { matrix: m }
    }

    pub fn inverse(&self) -> AffineTransform {
        // invertibility is a construction invariant
        let lin_inv = self
            .linear()
            .try_inverse()
            .expect("affine linear part is invertible");
        let t = Vector3::from(self.translation_part());
        let t_inv = -(lin_inv * t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin_inv);
        for a in 0..3 {
            m[(a, 3)] = t_inv[a];
        }
        AffineTransform { matrix: m }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    /// Largest absolute elementwise difference between two matrices.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        (self.matrix - other.matrix)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for AffineTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        AffineTransform::from_matrix(m).map_err(serde::de::Error::custom)
    }
}

/// Grid dimensions, voxel spacing and the voxel-index to world mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryDoc", into = "GeometryDoc")]
pub struct VolumeGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    index_to_world: AffineTransform,
    world_to_index: AffineTransform,
}

#[derive(Serialize, Deserialize)]
struct GeometryDoc {
    dims: [usize; 3],
    spacing: [f64; 3],
    index_to_world: AffineTransform,
}

impl TryFrom<GeometryDoc> for VolumeGeometry {
    type Error = Error;
    fn try_from(doc: GeometryDoc) -> Result<Self> {
        VolumeGeometry::new(doc.dims, doc.spacing, doc.index_to_world)
    }
}

impl From<VolumeGeometry> for GeometryDoc {
    fn from(g: VolumeGeometry) -> Self {
        GeometryDoc {
            dims: g.dims,
            spacing: g.spacing,
            index_to_world: g.index_to_world,
        }
    }
}

impl VolumeGeometry {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        index_to_world: AffineTransform,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGeometry(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(VolumeGeometry {
            dims,
            spacing,
            world_to_index: index_to_world.inverse(),
            index_to_world,
        })
    }

    /// Spacing-only geometry: a diagonal affine with no offset.
    pub fn diagonal(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Self::new(dims, spacing, AffineTransform::scaling(spacing))
    }

    /// Geometry whose spacing is read off the column norms of `index_to_world`.
    pub fn from_affine(dims: [usize; 3], index_to_world: AffineTransform) -> Result<Self> {
        let lin = index_to_world.linear();
        let spacing = [0, 1, 2].map(|c| lin.column(c).norm());
        Self::new(dims, spacing, index_to_world)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn index_to_world(&self) -> &AffineTransform {
        &self.index_to_world
    }

    pub fn world_to_index(&self) -> &AffineTransform {
        &self.world_to_index
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn voxel_of(&self, linear: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    pub fn world_of(&self, index: [f64; 3]) -> [f64; 3] {
        self.index_to_world.apply(index)
    }

    /// Same grid size and index-to-world mapping within `tol` per matrix entry.
    pub fn same_grid(&self, other: &VolumeGeometry, tol: f64) -> bool {
        self.dims == other.dims && self.index_to_world.max_abs_diff(&other.index_to_world) <= tol
    }

    pub(crate) fn ensure_same_grid(&self, other: &VolumeGeometry, what: &str) -> Result<()> {
        if self.same_grid(other, 1e-6) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    /// Geometry of the sub-grid starting at voxel `origin` with `size` voxels;
    /// world coordinates of corresponding voxels are unchanged.
    pub fn sub_grid(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Tiling(format!(
                    "sub-grid origin {origin:?} size {size:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let shift = AffineTransform::translation(origin.map(|o| o as f64));
        Self::new(size, self.spacing, self.index_to_world.compose(&shift))
    }
}

/// The canonical atlas grid: 172x220x156 voxels at 1 mm, index (86, 110, 78)
/// placed at the world origin.
pub fn atlas_geometry() -> VolumeGeometry {
    let offset = ATLAS_DIMS.map(|d| -((d / 2) as f64));
    VolumeGeometry::new(ATLAS_DIMS, [1.0; 3], AffineTransform::translation(offset))
        .expect("atlas geometry constants are valid")
}

/// Per-voxel value type accepted by [`Volume`].
pub trait Voxel: Copy + Send + Sync + 'static {
    fn is_valid(&self) -> bool {
        true
    }
}

impl Voxel for f64 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}
impl Voxel for bool {}
impl Voxel for u16 {}
impl Voxel for u32 {}

/// A dense 3D grid of voxels together with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    geometry: VolumeGeometry,
    data: Vec<T>,
}

pub type IntensityVolume = Volume<f64>;
pub type Mask = Volume<bool>;

impl<T: Voxel> Volume<T> {
    pub fn new(geometry: VolumeGeometry, data: Vec<T>) -> Result<Self> {
        let expected = geometry.num_voxels();
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: VolumeGeometry, value: T) -> Self {
        let n = geometry.num_voxels();
        Volume {
            geometry,
            data: vec![value; n],
        }
    }

    pub fn from_fn(geometry: VolumeGeometry, f: impl Fn([usize; 3]) -> T) -> Result<Self> {
        let data = (0..geometry.num_voxels())
            .map(|i| f(geometry.voxel_of(i)))
            .collect();
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geometry.linear_index(x, y, z)]
    }

    /// Replaces the geometry; the grid size must be unchanged.
    pub fn with_geometry(self, geometry: VolumeGeometry) -> Result<Self> {
        if geometry.dims != self.geometry.dims {
            return Err(Error::GeometryMismatch(format!(
                "cannot re-grid {:?} onto {:?}",
                self.geometry.dims, geometry.dims
            )));
        }
        Ok(Volume {
            geometry,
            data: self.data,
        })
    }

    /// Copies the box starting at `origin` of extent `size`.
    pub fn extract(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let geometry = self.geometry.sub_grid(origin, size)?;
        let mut data = Vec::with_capacity(geometry.num_voxels());
        for z in origin[2]..origin[2] + size[2] {
            for y in origin[1]..origin[1] + size[1] {
                let start = self.geometry.linear_index(origin[0], y, z);
                data.extend_from_slice(&self.data[start..start + size[0]]);
            }
        }
        Ok(Volume { geometry, data })
    }
}

impl Volume<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Integer label map over `num_labels` possible values, background 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    volume: Volume<u16>,
    num_labels: u16,
}

impl LabelVolume {
    pub fn new(geometry: VolumeGeometry, data: Vec<u16>, num_labels: u16) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::InvalidLabelCount(num_labels));
        }
        if let Some(&value) = data.iter().find(|&&v| v >= num_labels) {
            return Err(Error::LabelOutOfRange {
                value: value as u64,
                num_labels,
            });
        }
        Ok(LabelVolume {
            volume: Volume::new(geometry, data)?,
            num_labels,
        })
    }

    pub fn background(geometry: VolumeGeometry, num_labels: u16) -> Result<Self> {
        let data = vec![0; geometry.num_voxels()];
        Self::new(geometry, data, num_labels)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        self.volume.geometry()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volume.dims()
    }

    pub fn data(&self) -> &[u16] {
        self.volume.data()
    }

    pub fn num_labels(&self) -> u16 {
        self.num_labels
    }

    pub fn volume(&self) -> &Volume<u16> {
        &self.volume
    }

    pub fn into_data(self) -> Vec<u16> {
        self.volume.into_data()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.volume.get(x, y, z)
    }

    pub fn extract(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        Ok(LabelVolume {
            volume: self.volume.extract(origin, size)?,
            num_labels: self.num_labels,
        })
    }

    pub fn with_geometry(self, geometry: VolumeGeometry) -> Result<Self> {
        Ok(LabelVolume {
            volume: self.volume.with_geometry(geometry)?,
            num_labels: self.num_labels,
        })
    }

    /// Mask of voxels carrying a nonzero label.
    pub fn foreground(&self) -> Mask {
        Volume {
            geometry: self.geometry().clone(),
            data: self.data().iter().map(|&v| v != 0).collect(),
        }
    }
}

/// Maps target voxel indices to continuous source voxel indices.
fn index_map(
    src: &VolumeGeometry,
    transform: &AffineTransform,
    target: &VolumeGeometry,
) -> AffineTransform {
    src.world_to_index()
        .compose(transform)
        .compose(target.index_to_world())
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

/// Fills `out` slice-by-slice (one z plane per task) with `f(continuous source index)`.
fn pull_back<T: Voxel + Default>(
    target: &VolumeGeometry,
    map: &AffineTransform,
    f: impl Fn([f64; 3]) -> T + Sync,
) -> Vec<T> {
    let [nx, ny, nz] = target.dims();
    let m = map.matrix();
    let mut out = vec![T::default(); nx * ny * nz];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..ny {
                for x in 0..nx {
                    let (fx, fy, fz) = (x as f64, y as f64, z as f64);
                    let p = [0, 1, 2].map(|r| {
                        snap(m[(r, 0)] * fx + m[(r, 1)] * fy + m[(r, 2)] * fz + m[(r, 3)])
                    });
                    plane[x + nx * y] = f(p);
                }
            }
        });
    out
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

fn trilinear(src: &IntensityVolume, p: [f64; 3], fill: f64) -> f64 {
    let dims = src.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let v = p[a];
        if !(v >= 0.0 && v <= (dims[a] - 1) as f64) {
            return fill;
        }
        let f = v.floor();
        lo[a] = f as usize;
        frac[a] = v - f;
        hi[a] = if frac[a] > 0.0 { lo[a] + 1 } else { lo[a] };
    }
    let g = |x, y, z| src.get(x, y, z);
    let c00 = lerp(g(lo[0], lo[1], lo[2]), g(hi[0], lo[1], lo[2]), frac[0]);
    let c10 = lerp(g(lo[0], hi[1], lo[2]), g(hi[0], hi[1], lo[2]), frac[0]);
    let c01 = lerp(g(lo[0], lo[1], hi[2]), g(hi[0], lo[1], hi[2]), frac[0]);
    let c11 = lerp(g(lo[0], hi[1], hi[2]), g(hi[0], hi[1], hi[2]), frac[0]);
    let c0 = lerp(c00, c10, frac[1]);
    let c1 = lerp(c01, c11, frac[1]);
    lerp(c0, c1, frac[2])
}

/// Nearest voxel, ties rounded toward negative infinity.
#[inline]
fn nearest(p: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] - 0.5).ceil();
        if !(r >= 0.0 && r < dims[a] as f64) {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

/// Trilinear resampling of `src` onto `target`, background 0 outside the source.
pub fn resample_intensity(
    src: &IntensityVolume,
    transform: &AffineTransform,
    target: &VolumeGeometry,
) -> IntensityVolume {
    resample_intensity_with_fill(src, transform, target, 0.0)
}

pub fn resample_intensity_with_fill(
    src: &IntensityVolume,
    transform: &AffineTransform,
    target: &VolumeGeometry,
    fill: f64,
) -> IntensityVolume {
    let map = index_map(src.geometry(), transform, target);
    let data = pull_back(target, &map, |p| trilinear(src, p, fill));
    Volume {
        geometry: target.clone(),
        data,
    }
}

/// Nearest-neighbour resampling of labels onto `target`, background 0 outside.
pub fn resample_labels(
    src: &LabelVolume,
    transform: &AffineTransform,
    target: &VolumeGeometry,
) -> LabelVolume {
    resample_labels_with_fill(src, transform, target, 0)
}

/// Panics if `fill` is not a valid label for `src`.
pub fn resample_labels_with_fill(
    src: &LabelVolume,
    transform: &AffineTransform,
    target: &VolumeGeometry,
    fill: u16,
) -> LabelVolume {
    assert!(fill < src.num_labels(), "fill label out of range");
    let map = index_map(src.geometry(), transform, target);
    let dims = src.dims();
    let data = pull_back(target, &map, |p| match nearest(p, dims) {
        Some([x, y, z]) => src.get(x, y, z),
        None => fill,
    });
    LabelVolume {
        volume: Volume {
            geometry: target.clone(),
            data,
        },
        num_labels: src.num_labels(),
    }
}

struct Moments {
    centroid: [f64; 3],
    spread: [f64; 3],
}

fn world_moments(vol: &IntensityVolume) -> Result<Moments> {
    let g = vol.geometry();
    let mut mass = 0.0;
    let mut first = [0.0; 3];
    for (i, &v) in vol.data().iter().enumerate() {
        let w = v.abs();
        if w == 0.0 {
            continue;
        }
        let p = g.world_of(g.voxel_of(i).map(|c| c as f64));
        mass += w;
        for a in 0..3 {
            first[a] += w * p[a];
        }
    }
    if mass.is_nan() || mass <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let centroid = first.map(|s| s / mass);
    let mut second = [0.0; 3];
    for (i, &v) in vol.data().iter().enumerate() {
        let w = v.abs();
        if w == 0.0 {
            continue;
        }
        let p = g.world_of(g.voxel_of(i).map(|c| c as f64));
        for a in 0..3 {
            let d = p[a] - centroid[a];
            second[a] += w * d * d;
        }
    }
    Ok(Moments {
        centroid,
        spread: second.map(|s| (s / mass).sqrt()),
    })
}

/// Approximate registration from intensity moments.
///
/// Matches the intensity-weighted centroid and the per-axis standard
/// deviation of the absolute intensity of `moving` and `fixed` in world
/// coordinates. The result has translation and axis-aligned scaling only (no
/// rotation or shear) and maps fixed world coordinates to moving world
/// coordinates, i.e. it is the pull-back transform for
/// `resample_intensity(moving, &t, fixed.geometry())`. This is a coarse
/// stand-in for proper block-matching registration; supply an external affine
/// when accuracy matters.
pub fn estimate_affine_moments(
    moving: &IntensityVolume,
    fixed: &IntensityVolume,
) -> Result<AffineTransform> {
    let m = world_moments(moving)?;
    let f = world_moments(fixed)?;
    let mut mat = Matrix4::identity();
    for a in 0..3 {
        // an axis with no spread (single plane) carries no scale information
        let scale = if m.spread[a] > 0.0 && f.spread[a] > 0.0 {
            m.spread[a] / f.spread[a]
        } else {
            1.0
        };
        mat[(a, a)] = scale;
        mat[(a, 3)] = m.centroid[a] - scale * f.centroid[a];
    }
    AffineTransform::from_matrix(mat)
}
