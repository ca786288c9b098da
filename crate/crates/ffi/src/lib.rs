//! C interface to `slant-core`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_read_*`/`*_build` function and released with the matching
//! `*_free`. Fallible functions return a [`SlantStatus`]; on failure the
//! message is available from [`slant_last_error`] on the same thread.
//!
//! Pointer arguments must be valid for the documented extent and
//! non-overlapping with outputs. Affines are 4x4 row-major `double[16]`
//! mapping voxel indices to world millimetres.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use slant_core::error::Error;
use slant_core::geometry::{
    resample_intensity, resample_labels, AffineTransform, IntensityVolume, LabelVolume, Volume,
    VolumeGeometry,
};
use slant_core::harmonize::HarmonizationModel;
use slant_core::tiling::{extract_tile, TileGrid};
use slant_core::{evaluate, fusion, io};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlantStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Geometry = 5,
    Harmonization = 6,
    Tiling = 7,
    Fusion = 8,
    Segmentation = 9,
    Panic = 10,
}

pub struct SlantIntensityVolume(IntensityVolume);
pub struct SlantLabelVolume(LabelVolume);
pub struct SlantTileGrid(TileGrid);
pub struct SlantHarmonizationModel(HarmonizationModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SlantStatus {
    match e {
        Error::Io { .. } | Error::Document { .. } => SlantStatus::Io,
        Error::NiftiFormat(_)
        | Error::UnsupportedDatatype(_)
        | Error::Truncated { .. }
        | Error::DimsOverflow(_) => SlantStatus::Format,
        Error::InvalidGeometry(_)
        | Error::SingularTransform { .. }
        | Error::InvalidAffine(_)
        | Error::GeometryMismatch(_)
        | Error::ZeroMass => SlantStatus::Geometry,
        Error::ZeroVariance(_) | Error::EmptyMask => SlantStatus::Harmonization,
        Error::Tiling(_) => SlantStatus::Tiling,
        Error::Fusion(_) => SlantStatus::Fusion,
        Error::Tile { .. } | Error::ExternalProcess { .. } | Error::Backend(_) => {
            SlantStatus::Segmentation
        }
        _ => SlantStatus::InvalidArgument,
    }
}

struct Failure(SlantStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SlantStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SlantStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic for [`slant_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SlantStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlantStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SlantStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn array<const N: usize, T: Copy>(p: *const T, what: &str) -> Result<[T; N], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::array::from_fn(|i| *p.add(i)))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn affine_arg(p: *const f64) -> Result<AffineTransform, Failure> {
    let m: [f64; 16] = array(p, "affine")?;
    let rows = [
        [m[0], m[1], m[2], m[3]],
        [m[4], m[5], m[6], m[7]],
        [m[8], m[9], m[10], m[11]],
    ];
    if m[12..] != [0.0, 0.0, 0.0, 1.0] {
        return Err(invalid("affine last row must be 0 0 0 1"));
    }
    Ok(AffineTransform::from_rows(rows)?)
}

/// Geometry from dims plus an optional index-to-world affine (NULL: 1 mm identity).
unsafe fn geometry_arg(dims: *const usize, affine: *const f64) -> Result<VolumeGeometry, Failure> {
    let dims: [usize; 3] = array(dims, "dims")?;
    if affine.is_null() {
        return Ok(VolumeGeometry::diagonal(dims, [1.0; 3])?);
    }
    Ok(VolumeGeometry::from_affine(dims, affine_arg(affine)?)?)
}

unsafe fn write_affine(g: &VolumeGeometry, out: *mut f64) {
    let rows = g.index_to_world().rows();
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            *out.add(4 * r + c) = *v;
        }
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn slant_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slant_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- intensity volumes

/// Copies `len` doubles (x fastest) into a new volume.
#[no_mangle]
pub unsafe extern "C" fn slant_intensity_new(
    dims: *const usize,
    affine: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut SlantIntensityVolume,
) -> SlantStatus {
    guard(|| {
        let geom = geometry_arg(dims, affine)?;
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        put(out, SlantIntensityVolume(Volume::new(geom, values)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn slant_intensity_read_nifti(
    path: *const c_char,
    out: *mut *mut SlantIntensityVolume,
) -> SlantStatus {
    guard(|| {
        let (vol, _) = io::read_nifti_intensity(path_arg(path)?)?;
        put(out, SlantIntensityVolume(vol))
    })
}

/// Writes float32 NIfTI-1.
#[no_mangle]
pub unsafe extern "C" fn slant_intensity_write_nifti(
    vol: *const SlantIntensityVolume,
    path: *const c_char,
) -> SlantStatus {
    guard(|| {
        let vol = obj(vol, "volume")?;
        Ok(io::write_nifti_intensity(&vol.0, path_arg(path)?)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn slant_intensity_dims(
    vol: *const SlantIntensityVolume,
    dims: *mut usize,
) -> SlantStatus {
    guard(|| {
        let vol = obj(vol, "volume")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        for (i, d) in vol.0.dims().iter().enumerate() {
            *dims.add(i) = *d;
        }
        Ok(())
    })
}

/// Writes the index-to-world affine into `affine[16]`.
#[no_mangle]
pub unsafe extern "C" fn slant_intensity_affine(
    vol: *const SlantIntensityVolume,
    affine: *mut f64,
) -> SlantStatus {
    guard(|| {
        let vol = obj(vol, "volume")?;
        if affine.is_null() {
            return Err(null("affine"));
        }
        write_affine(vol.0.geometry(), affine);
        Ok(())
    })
}

/// Borrowed pointer to the voxel data, valid while the volume lives.
#[no_mangle]
pub unsafe extern "C" fn slant_intensity_data(
    vol: *const SlantIntensityVolume,
    len: *mut usize,
) -> *const f64 {
    let Some(vol) = vol.as_ref() else {
        return ptr::null();
    };
    if !len.is_null() {
        *len = vol.0.data().len();
    }
    vol.0.data().as_ptr()
}

#[no_mangle]
pub unsafe extern "C" fn slant_intensity_free(vol: *mut SlantIntensityVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

// ---- label volumes

/// Copies `len` labels (x fastest), each below `num_labels`, into a new volume.
#[no_mangle]
pub unsafe extern "C" fn slant_labels_new(
    dims: *const usize,
    affine: *const f64,
    data: *const u16,
    len: usize,
    num_labels: u16,
    out: *mut *mut SlantLabelVolume,
) -> SlantStatus {
    guard(|| {
        let geom = geometry_arg(dims, affine)?;
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        put(
            out,
            SlantLabelVolume(LabelVolume::new(geom, values, num_labels)?),
        )
    })
}

/// `num_labels` 0 infers the count from the largest label present.
#[no_mangle]
pub unsafe extern "C" fn slant_labels_read_nifti(
    path: *const c_char,
    num_labels: u16,
    out: *mut *mut SlantLabelVolume,
) -> SlantStatus {
    guard(|| {
        let n = (num_labels != 0).then_some(num_labels);
        let (vol, _) = io::read_nifti_labels(path_arg(path)?, n)?;
        put(out, SlantLabelVolume(vol))
    })
}

/// Writes int16 NIfTI-1.
#[no_mangle]
pub unsafe extern "C" fn slant_labels_write_nifti(
    vol: *const SlantLabelVolume,
    path: *const c_char,
) -> SlantStatus {
    guard(|| {
        let vol = obj(vol, "volume")?;
        Ok(io::write_nifti_labels(&vol.0, path_arg(path)?)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn slant_labels_dims(
    vol: *const SlantLabelVolume,
    dims: *mut usize,
) -> SlantStatus {
    guard(|| {
        let vol = obj(vol, "volume")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        for (i, d) in vol.0.dims().iter().enumerate() {
            *dims.add(i) = *d;
        }
        Ok(())
    })
}

/// 0 when `vol` is NULL.
#[no_mangle]
pub unsafe extern "C" fn slant_labels_num_labels(vol: *const SlantLabelVolume) -> u16 {
    vol.as_ref().map_or(0, |v| v.0.num_labels())
}

#[no_mangle]
pub unsafe extern "C" fn slant_labels_affine(
    vol: *const SlantLabelVolume,
    affine: *mut f64,
) -> SlantStatus {
    guard(|| {
        let vol = obj(vol, "volume")?;
        if affine.is_null() {
            return Err(null("affine"));
        }
        write_affine(vol.0.geometry(), affine);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn slant_labels_data(
    vol: *const SlantLabelVolume,
    len: *mut usize,
) -> *const u16 {
    let Some(vol) = vol.as_ref() else {
        return ptr::null();
    };
    if !len.is_null() {
        *len = vol.0.data().len();
    }
    vol.0.data().as_ptr()
}

#[no_mangle]
pub unsafe extern "C" fn slant_labels_free(vol: *mut SlantLabelVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

// ---- resampling

/// Trilinear resampling onto the grid of `target`. `transform` maps target
/// world coordinates to source world coordinates.
#[no_mangle]
pub unsafe extern "C" fn slant_resample_intensity(
    src: *const SlantIntensityVolume,
    transform: *const f64,
    target: *const SlantIntensityVolume,
    out: *mut *mut SlantIntensityVolume,
) -> SlantStatus {
    guard(|| {
        let src = obj(src, "source")?;
        let target = obj(target, "target")?;
        let t = affine_arg(transform)?;
        put(
            out,
            SlantIntensityVolume(resample_intensity(&src.0, &t, target.0.geometry())),
        )
    })
}

/// Nearest-neighbour label resampling onto the grid of `target`.
#[no_mangle]
pub unsafe extern "C" fn slant_resample_labels(
    src: *const SlantLabelVolume,
    transform: *const f64,
    target: *const SlantLabelVolume,
    out: *mut *mut SlantLabelVolume,
) -> SlantStatus {
    guard(|| {
        let src = obj(src, "source")?;
        let target = obj(target, "target")?;
        let t = affine_arg(transform)?;
        put(
            out,
            SlantLabelVolume(resample_labels(&src.0, &t, target.0.geometry())),
        )
    })
}

// ---- tiling

#[no_mangle]
pub unsafe extern "C" fn slant_grid_build(
    atlas_dims: *const usize,
    grid: *const usize,
    tile_size: *const usize,
    out: *mut *mut SlantTileGrid,
) -> SlantStatus {
    guard(|| {
        let g = TileGrid::build(
            array(atlas_dims, "atlas_dims")?,
            array(grid, "grid")?,
            array(tile_size, "tile_size")?,
        )?;
        put(out, SlantTileGrid(g))
    })
}

/// The 27-tile layout on the 172x220x156 atlas.
#[no_mangle]
pub unsafe extern "C" fn slant_grid_slant27(out: *mut *mut SlantTileGrid) -> SlantStatus {
    guard(|| put(out, SlantTileGrid(TileGrid::slant27())))
}

/// 0 when `grid` is NULL.
#[no_mangle]
pub unsafe extern "C" fn slant_grid_len(grid: *const SlantTileGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.len())
}

/// Origin and size of tile `index` (x fastest, then y, then z).
#[no_mangle]
pub unsafe extern "C" fn slant_grid_tile(
    grid: *const SlantTileGrid,
    index: usize,
    origin: *mut usize,
    size: *mut usize,
) -> SlantStatus {
    guard(|| {
        let grid = obj(grid, "grid")?;
        let tile = grid
            .0
            .tiles()
            .get(index)
            .ok_or_else(|| invalid(format!("tile {index} of {}", grid.0.len())))?;
        if origin.is_null() || size.is_null() {
            return Err(null("origin/size"));
        }
        for a in 0..3 {
            *origin.add(a) = tile.origin[a];
            *size.add(a) = tile.size[a];
        }
        Ok(())
    })
}

/// Fills `counts[len]` with the number of tiles covering each atlas voxel;
/// `len` must equal the atlas voxel count.
#[no_mangle]
pub unsafe extern "C" fn slant_grid_coverage(
    grid: *const SlantTileGrid,
    counts: *mut u32,
    len: usize,
) -> SlantStatus {
    guard(|| {
        let grid = obj(grid, "grid")?;
        if counts.is_null() {
            return Err(null("counts"));
        }
        let map = grid.0.coverage_map();
        if map.counts.len() != len {
            return Err(invalid(format!(
                "coverage needs {} entries, got {len}",
                map.counts.len()
            )));
        }
        std::slice::from_raw_parts_mut(counts, len).copy_from_slice(&map.counts);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn slant_grid_free(grid: *mut SlantTileGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Copies tile `index` out of an atlas-space volume.
#[no_mangle]
pub unsafe extern "C" fn slant_extract_tile(
    vol: *const SlantIntensityVolume,
    grid: *const SlantTileGrid,
    index: usize,
    out: *mut *mut SlantIntensityVolume,
) -> SlantStatus {
    guard(|| {
        let vol = obj(vol, "volume")?;
        let grid = obj(grid, "grid")?;
        let tile = grid
            .0
            .tiles()
            .get(index)
            .ok_or_else(|| invalid(format!("tile {index} of {}", grid.0.len())))?;
        put(out, SlantIntensityVolume(extract_tile(&vol.0, tile)?))
    })
}

// ---- fusion

unsafe fn seg_list(
    segs: *const *const SlantLabelVolume,
    count: usize,
) -> Result<Vec<LabelVolume>, Failure> {
    if segs.is_null() {
        return Err(null("segmentation list"));
    }
    std::slice::from_raw_parts(segs, count)
        .iter()
        .map(|&p| obj(p, "segmentation").map(|s| s.0.clone()))
        .collect()
}

unsafe fn atlas_of(
    grid: &TileGrid,
    reference: *const SlantIntensityVolume,
) -> Result<VolumeGeometry, Failure> {
    match reference.as_ref() {
        Some(r) => Ok(r.0.geometry().clone()),
        None => Ok(VolumeGeometry::diagonal(grid.atlas_dims(), [1.0; 3])?),
    }
}

/// Majority vote over `count` tile segmentations in grid order. The fused
/// volume takes the grid of `reference`, or a 1 mm grid when it is NULL.
/// `tie_count` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn slant_fuse_majority(
    segs: *const *const SlantLabelVolume,
    count: usize,
    grid: *const SlantTileGrid,
    reference: *const SlantIntensityVolume,
    out: *mut *mut SlantLabelVolume,
    tie_count: *mut usize,
) -> SlantStatus {
    guard(|| {
        let grid = obj(grid, "grid")?;
        let segs = seg_list(segs, count)?;
        let num_labels = segs
            .first()
            .map(|s| s.num_labels())
            .ok_or_else(|| invalid("no segmentations"))?;
        let atlas = atlas_of(&grid.0, reference)?;
        let result = fusion::fuse_majority(&segs, &grid.0, &atlas, num_labels)?;
        if !tie_count.is_null() {
            *tie_count = result.tie_count;
        }
        put(out, SlantLabelVolume(result.fused))
    })
}

/// Places each tile at its origin; the grid must be a partition.
#[no_mangle]
pub unsafe extern "C" fn slant_fuse_concatenate(
    segs: *const *const SlantLabelVolume,
    count: usize,
    grid: *const SlantTileGrid,
    reference: *const SlantIntensityVolume,
    out: *mut *mut SlantLabelVolume,
) -> SlantStatus {
    guard(|| {
        let grid = obj(grid, "grid")?;
        let segs = seg_list(segs, count)?;
        let atlas = atlas_of(&grid.0, reference)?;
        put(
            out,
            SlantLabelVolume(fusion::fuse_concatenate(&segs, &grid.0, &atlas)?),
        )
    })
}

// ---- evaluation

/// Dice for one label; writes NaN when neither volume contains it.
#[no_mangle]
pub unsafe extern "C" fn slant_dice(
    automatic: *const SlantLabelVolume,
    manual: *const SlantLabelVolume,
    label: u16,
    out: *mut f64,
) -> SlantStatus {
    guard(|| {
        let (a, m) = (obj(automatic, "automatic")?, obj(manual, "manual")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = evaluate::dice(&a.0, &m.0, label)?.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Mean and median Dice over the labels present in either volume (NaN when
/// none are) and the number of such labels. Any output may be NULL.
#[no_mangle]
pub unsafe extern "C" fn slant_dice_summary(
    automatic: *const SlantLabelVolume,
    manual: *const SlantLabelVolume,
    mean: *mut f64,
    median: *mut f64,
    labels_evaluated: *mut usize,
) -> SlantStatus {
    guard(|| {
        let (a, m) = (obj(automatic, "automatic")?, obj(manual, "manual")?);
        let r = evaluate::report(&a.0, &m.0)?;
        if !mean.is_null() {
            *mean = r.mean_dsc.unwrap_or(f64::NAN);
        }
        if !median.is_null() {
            *median = r.median_dsc.unwrap_or(f64::NAN);
        }
        if !labels_evaluated.is_null() {
            *labels_evaluated = r.labels_evaluated;
        }
        Ok(())
    })
}

// ---- harmonization

/// Loads a model directory written by `slant fit-harmonization`.
#[no_mangle]
pub unsafe extern "C" fn slant_harmonization_load(
    dir: *const c_char,
    out: *mut *mut SlantHarmonizationModel,
) -> SlantStatus {
    guard(|| {
        let model = HarmonizationModel::load(path_arg(dir)?)?;
        put(out, SlantHarmonizationModel(model))
    })
}

/// Harmonizes an atlas-space volume. `beta1`/`beta0` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn slant_harmonize(
    model: *const SlantHarmonizationModel,
    vol: *const SlantIntensityVolume,
    out: *mut *mut SlantIntensityVolume,
    beta1: *mut f64,
    beta0: *mut f64,
) -> SlantStatus {
    guard(|| {
        let model = obj(model, "model")?;
        let vol = obj(vol, "volume")?;
        let (h, fit) = model.0.apply(&vol.0)?;
        if !beta1.is_null() {
            *beta1 = fit.beta1;
        }
        if !beta0.is_null() {
            *beta0 = fit.beta0;
        }
        put(out, SlantIntensityVolume(h))
    })
}

#[no_mangle]
pub unsafe extern "C" fn slant_harmonization_free(model: *mut SlantHarmonizationModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
