#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slant_core::geometry::{
    AffineTransform, IntensityVolume, LabelVolume, Mask, Volume, VolumeGeometry,
};
use slant_core::tiling::TileGrid;

pub const PHANTOM_LABELS: u16 = 9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Label phantom made of nested ellipsoids split into hemispheres and a
/// front/back half. Regions are large relative to the voxel size.
pub fn phantom_labels(geom: &VolumeGeometry) -> LabelVolume {
    let [nx, ny, nz] = geom.dims();
    let c = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let r = [nx as f64 * 0.42, ny as f64 * 0.42, nz as f64 * 0.42];
    let data = (0..nx * ny * nz)
        .map(|i| {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let u = [
                (x as f64 - c[0]) / r[0],
                (y as f64 - c[1]) / r[1],
                (z as f64 - c[2]) / r[2],
            ];
            let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            if rho > 1.0 {
                return 0;
            }
            let shell: u16 = if rho < 0.45 { 0 } else { 1 };
            let side = (u[0] >= 0.0) as u16;
            let front = (u[1] >= 0.0) as u16;
            1 + shell * 4 + side * 2 + front
        })
        .collect();
    LabelVolume::new(geom.clone(), data, PHANTOM_LABELS).unwrap()
}

/// Intensities that follow the labels with a gentle gradient on top.
pub fn phantom_intensity(labels: &LabelVolume) -> IntensityVolume {
    let [nx, _, _] = labels.dims();
    let data = labels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| 10.0 + 12.5 * l as f64 + (i % nx) as f64 * 0.01)
        .collect();
    Volume::new(labels.geometry().clone(), data).unwrap()
}

pub fn phantom_mask(labels: &LabelVolume) -> Mask {
    Volume::new(
        labels.geometry().clone(),
        labels.data().iter().map(|&l| l > 0).collect(),
    )
    .unwrap()
}

pub fn random_intensity(geom: &VolumeGeometry, seed: u64) -> IntensityVolume {
    let mut r = rng(seed);
    let n = geom.num_voxels();
    Volume::new(
        geom.clone(),
        (0..n).map(|_| r.random_range(-50.0..150.0)).collect(),
    )
    .unwrap()
}

pub fn random_labels(geom: &VolumeGeometry, num_labels: u16, seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    let n = geom.num_voxels();
    LabelVolume::new(
        geom.clone(),
        (0..n).map(|_| r.random_range(0..num_labels)).collect(),
        num_labels,
    )
    .unwrap()
}

/// A 12-parameter-ish transform: rotations about two axes plus a translation.
pub fn oblique(angle_x: f64, angle_z: f64, shift: [f64; 3]) -> AffineTransform {
    AffineTransform::translation(shift)
        .compose(&AffineTransform::rotation(2, angle_z))
        .compose(&AffineTransform::rotation(0, angle_x))
}

/// Brute-force majority vote: every voxel counts every tile that contains it.
pub fn brute_majority(
    segs: &[LabelVolume],
    grid: &TileGrid,
    num_labels: u16,
) -> (Vec<u16>, usize, Vec<u32>) {
    let [nx, ny, nz] = grid.atlas_dims();
    let mut fused = Vec::with_capacity(nx * ny * nz);
    let mut cover = Vec::with_capacity(nx * ny * nz);
    let mut ties = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut counts = vec![0u32; num_labels as usize];
                let mut n = 0;
                for (tile, seg) in grid.tiles().iter().zip(segs) {
                    let o = tile.origin;
                    let s = tile.size;
                    if x >= o[0]
                        && x < o[0] + s[0]
                        && y >= o[1]
                        && y < o[1] + s[1]
                        && z >= o[2]
                        && z < o[2] + s[2]
                    {
                        counts[seg.get(x - o[0], y - o[1], z - o[2]) as usize] += 1;
                        n += 1;
                    }
                }
                let best = *counts.iter().max().unwrap();
                let winner = counts.iter().position(|&c| c == best).unwrap();
                if counts.iter().filter(|&&c| c == best).count() > 1 {
                    ties += 1;
                }
                fused.push(winner as u16);
                cover.push(n);
            }
        }
    }
    (fused, ties, cover)
}

/// Tile size scaled from the 172x220x156 / 96x128x88 proportions.
pub fn scaled_tile_size(dims: [usize; 3]) -> [usize; 3] {
    let atlas = [172.0, 220.0, 156.0];
    let tile = [96.0, 128.0, 88.0];
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (tile[a] * dims[a] as f64 / atlas[a]).round() as usize;
    }
    out
}

/// Converts a little-endian single-file NIfTI-1 image to big-endian by
/// swapping every numeric header field and every data element.
pub fn nifti_to_big_endian(le: &[u8]) -> Vec<u8> {
    // (offset, element width, element count)
    const FIELDS: &[(usize, usize, usize)] = &[
        (0, 4, 1),    // sizeof_hdr
        (32, 4, 1),   // extents
        (36, 2, 1),   // session_error
        (40, 2, 8),   // dim
        (56, 4, 3),   // intent_p1..3
        (68, 2, 1),   // intent_code
        (70, 2, 1),   // datatype
        (72, 2, 1),   // bitpix
        (74, 2, 1),   // slice_start
        (76, 4, 8),   // pixdim
        (108, 4, 1),  // vox_offset
        (112, 4, 1),  // scl_slope
        (116, 4, 1),  // scl_inter
        (120, 2, 1),  // slice_end
        (124, 4, 4),  // cal_max, cal_min, slice_duration, toffset
        (140, 4, 2),  // glmax, glmin
        (252, 2, 2),  // qform_code, sform_code
        (256, 4, 6),  // quatern_b..d, qoffset_x..z
        (280, 4, 12), // srow_x, srow_y, srow_z
    ];
    let mut out = le.to_vec();
    for &(off, width, count) in FIELDS {
        for k in 0..count {
            out[off + k * width..off + (k + 1) * width].reverse();
        }
    }
    let datatype = i16::from_le_bytes([le[70], le[71]]);
    let width = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => panic!("unexpected datatype {other}"),
    };
    let vox_offset = f32::from_le_bytes(le[108..112].try_into().unwrap()) as usize;
    for chunk in out[vox_offset..].chunks_exact_mut(width) {
        chunk.reverse();
    }
    out
}
