//! Single-file NIfTI-1 reading and writing, a raw fixture format, and the
//! small text documents (affines, JSON sidecars) the pipeline exchanges.
//!
//! Only three datatypes are supported: uint8 (2), int16 (4) and float32 (16).
//! The reader accepts either byte order, detected from the header size field;
//! the writer always emits little-endian data at offset 352 with the sform
//! rows filled in.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, IntensityVolume, LabelVolume, Volume, VolumeGeometry};

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";

// byte offsets into the 348-byte header
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrderKind {
    Little,
    Big,
}

/// The header fields this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderSummary {
    pub dims: [usize; 3],
    pub datatype: NiftiDatatype,
    pub spacing: [f64; 3],
    /// sform rows, or `None` when the file carries no sform.
    pub srow: Option<[[f64; 4]; 3]>,
    pub vox_offset: usize,
    pub byte_order: ByteOrderKind,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

fn parse_header_with<E: ByteOrder>(
    h: &[u8],
    byte_order: ByteOrderKind,
) -> Result<NiftiHeaderSummary> {
    if &h[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC_SINGLE_FILE {
        return Err(Error::NiftiFormat(format!(
            "bad magic {:?}, expected single-file \"n+1\\0\"",
            &h[OFF_MAGIC..OFF_MAGIC + 4]
        )));
    }
    let dim: Vec<i16> = (0..8).map(|i| E::read_i16(&h[OFF_DIM + 2 * i..])).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::NiftiFormat(format!(
            "dim[0] = {ndim} out of range 1..=7"
        )));
    }
    let mut dims = [1usize; 3];
    for i in 1..=ndim as usize {
        if dim[i] < 1 {
            return Err(Error::NiftiFormat(format!(
                "dim[{i}] = {} is not positive",
                dim[i]
            )));
        }
        if i <= 3 {
            dims[i - 1] = dim[i] as usize;
        } else if dim[i] != 1 {
            return Err(Error::NiftiFormat(format!(
                "only 3D volumes are supported, dim[{i}] = {}",
                dim[i]
            )));
        }
    }
    let datatype = NiftiDatatype::from_code(E::read_i16(&h[OFF_DATATYPE..]))?;
    let pixdim: Vec<f32> = (0..8)
        .map(|i| E::read_f32(&h[OFF_PIXDIM + 4 * i..]))
        .collect();
    let spacing = [1, 2, 3].map(|i| {
        let p = pixdim[i].abs() as f64;
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    });
    let vox_offset_f = E::read_f32(&h[OFF_VOX_OFFSET..]);
    if vox_offset_f.is_nan()
        || vox_offset_f < DEFAULT_VOX_OFFSET as f32
        || vox_offset_f.fract() != 0.0
    {
        return Err(Error::NiftiFormat(format!(
            "vox_offset {vox_offset_f} must be an integer >= {DEFAULT_VOX_OFFSET}"
        )));
    }
    let sform_code = E::read_i16(&h[OFF_SFORM_CODE..]);
    let srow = (sform_code > 0).then(|| {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = E::read_f32(&h[OFF_SROW + 16 * r + 4 * c..]) as f64;
            }
        }
        rows
    });
    Ok(NiftiHeaderSummary {
        dims,
        datatype,
        spacing,
        srow,
        vox_offset: vox_offset_f as usize,
        byte_order,
        scl_slope: E::read_f32(&h[OFF_SCL_SLOPE..]),
        scl_inter: E::read_f32(&h[OFF_SCL_INTER..]),
    })
}

/// Parses the first 348 bytes of a single-file NIfTI-1 image.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeaderSummary> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::NiftiFormat(format!(
            "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        parse_header_with::<LittleEndian>(bytes, ByteOrderKind::Little)
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        parse_header_with::<BigEndian>(bytes, ByteOrderKind::Big)
    } else {
        Err(Error::NiftiFormat(
            "header size field is not 348 in either byte order".into(),
        ))
    }
}

impl NiftiHeaderSummary {
    pub fn geometry(&self) -> Result<VolumeGeometry> {
        match self.srow {
            Some(rows) => {
                VolumeGeometry::new(self.dims, self.spacing, AffineTransform::from_rows(rows)?)
            }
            None => {
                log::warn!("NIfTI file has no sform; using a spacing-only diagonal affine");
                VolumeGeometry::diagonal(self.dims, self.spacing)
            }
        }
    }

    fn data_section<'a>(&self, bytes: &'a [u8]) -> Result<&'a [u8]> {
        let n: usize = self.dims.iter().product();
        let expected = n * self.datatype.bytes_per_voxel();
        let available = bytes.len().saturating_sub(self.vox_offset);
        if available < expected {
            return Err(Error::Truncated {
                expected,
                actual: available,
            });
        }
        Ok(&bytes[self.vox_offset..self.vox_offset + expected])
    }

    fn decode(&self, bytes: &[u8]) -> Result<Vec<f64>> {
        let raw = self.data_section(bytes)?;
        let w = self.datatype.bytes_per_voxel();
        let big = self.byte_order == ByteOrderKind::Big;
        let values = raw
            .chunks_exact(w)
            .map(|c| match (self.datatype, big) {
                (NiftiDatatype::Uint8, _) => c[0] as f64,
                (NiftiDatatype::Int16, false) => LittleEndian::read_i16(c) as f64,
                (NiftiDatatype::Int16, true) => BigEndian::read_i16(c) as f64,
                (NiftiDatatype::Float32, false) => LittleEndian::read_f32(c) as f64,
                (NiftiDatatype::Float32, true) => BigEndian::read_f32(c) as f64,
            })
            .collect();
        Ok(values)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a NIfTI-1 file as real intensities, applying `scl_slope`/`scl_inter`
/// when a nonzero slope is present.
pub fn read_nifti_intensity(
    path: impl AsRef<Path>,
) -> Result<(IntensityVolume, NiftiHeaderSummary)> {
    let bytes = read_bytes(path.as_ref())?;
    let header = parse_header(&bytes)?;
    let geometry = header.geometry()?;
    let mut data = header.decode(&bytes)?;
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok((Volume::new(geometry, data)?, header))
}

/// Reads a NIfTI-1 file as labels. Values must be non-negative integers; with
/// `num_labels = None` the label count is inferred as `max + 1` (at least 2).
pub fn read_nifti_labels(
    path: impl AsRef<Path>,
    num_labels: Option<u16>,
) -> Result<(LabelVolume, NiftiHeaderSummary)> {
    let bytes = read_bytes(path.as_ref())?;
    let header = parse_header(&bytes)?;
    let geometry = header.geometry()?;
    let raw = header.decode(&bytes)?;
    let mut data = Vec::with_capacity(raw.len());
    for v in raw {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u16::MAX as f64) {
            return Err(Error::NiftiFormat(format!(
                "value {v} is not a valid label"
            )));
        }
        data.push(v as u16);
    }
    let num_labels = match num_labels {
        Some(l) => l,
        None => {
            let max = data.iter().copied().max().unwrap_or(0);
            (max.saturating_add(1)).max(2)
        }
    };
    Ok((LabelVolume::new(geometry, data, num_labels)?, header))
}

fn header_bytes(geometry: &VolumeGeometry, datatype: NiftiDatatype) -> Result<Vec<u8>> {
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    let dims = geometry.dims();
    let mut dim = [3i16, 1, 1, 1, 1, 1, 1, 1];
    for a in 0..3 {
        dim[a + 1] = i16::try_from(dims[a]).map_err(|_| Error::DimsOverflow(dims[a]))?;
    }
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[OFF_DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[OFF_DATATYPE..], datatype.code());
    LittleEndian::write_i16(&mut h[OFF_BITPIX..], 8 * datatype.bytes_per_voxel() as i16);
    let spacing = geometry.spacing();
    let pixdim = [
        1.0f32,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[OFF_PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[OFF_VOX_OFFSET..], DEFAULT_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[OFF_SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[OFF_SCL_INTER..], 0.0);
    // millimetres, seconds
    h[OFF_XYZT_UNITS] = 2 | 8;
    let descrip = b"slant";
    h[OFF_DESCRIP..OFF_DESCRIP + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[OFF_QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut h[OFF_SFORM_CODE..], 1);
    let rows = geometry.index_to_world().rows();
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[OFF_SROW + 16 * r + 4 * c..], rows[r][c] as f32);
        }
    }
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC_SINGLE_FILE);
    Ok(h)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Encodes intensities as a float32 NIfTI-1 image.
pub fn encode_nifti_intensity(vol: &IntensityVolume) -> Result<Vec<u8>> {
    let mut out = header_bytes(vol.geometry(), NiftiDatatype::Float32)?;
    out.reserve(vol.data().len() * 4);
    let mut buf = [0u8; 4];
    for &v in vol.data() {
        LittleEndian::write_f32(&mut buf, v as f32);
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

/// Encodes labels as an int16 NIfTI-1 image.
pub fn encode_nifti_labels(vol: &LabelVolume) -> Result<Vec<u8>> {
    if vol.num_labels() as u32 - 1 > i16::MAX as u32 {
        return Err(Error::NiftiFormat(format!(
            "{} labels do not fit in int16",
            vol.num_labels()
        )));
    }
    let mut out = header_bytes(vol.geometry(), NiftiDatatype::Int16)?;
    out.reserve(vol.data().len() * 2);
    let mut buf = [0u8; 2];
    for &v in vol.data() {
        LittleEndian::write_i16(&mut buf, v as i16);
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

pub fn write_nifti_intensity(vol: &IntensityVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_nifti_intensity(vol)?)
}

pub fn write_nifti_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_nifti_labels(vol)?)
}

pub fn write_nifti_mask(mask: &Volume<bool>, path: impl AsRef<Path>) -> Result<()> {
    let labels = LabelVolume::new(
        mask.geometry().clone(),
        mask.data().iter().map(|&b| b as u16).collect(),
        2,
    )?;
    write_nifti_labels(&labels, path)
}

/// Reads a mask; any nonzero value is foreground.
pub fn read_nifti_mask(path: impl AsRef<Path>) -> Result<Volume<bool>> {
    let (vol, _) = read_nifti_intensity(path)?;
    let geometry = vol.geometry().clone();
    Volume::new(geometry, vol.data().iter().map(|&v| v != 0.0).collect())
}

/// Sidecar of the raw fixture format; the voxel blob sits next to it with a
/// `.raw` extension, little-endian f64 for intensities and u16 for labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: AffineTransform,
    pub kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_labels: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawKind {
    Intensity,
    Labels,
}

fn raw_paths(sidecar: &Path) -> (PathBuf, PathBuf) {
    (sidecar.to_path_buf(), sidecar.with_extension("raw"))
}

fn raw_sidecar(geometry: &VolumeGeometry, kind: RawKind, num_labels: Option<u16>) -> RawSidecar {
    RawSidecar {
        dims: geometry.dims(),
        spacing: geometry.spacing(),
        affine: *geometry.index_to_world(),
        kind,
        num_labels,
    }
}

pub fn write_raw_intensity(vol: &IntensityVolume, sidecar: impl AsRef<Path>) -> Result<()> {
    let (json, blob) = raw_paths(sidecar.as_ref());
    write_json(
        &json,
        &raw_sidecar(vol.geometry(), RawKind::Intensity, None),
    )?;
    let mut bytes = vec![0u8; vol.data().len() * 8];
    LittleEndian::write_f64_into(vol.data(), &mut bytes);
    write_file(&blob, &bytes)
}

pub fn write_raw_labels(vol: &LabelVolume, sidecar: impl AsRef<Path>) -> Result<()> {
    let (json, blob) = raw_paths(sidecar.as_ref());
    write_json(
        &json,
        &raw_sidecar(vol.geometry(), RawKind::Labels, Some(vol.num_labels())),
    )?;
    let mut bytes = vec![0u8; vol.data().len() * 2];
    LittleEndian::write_u16_into(vol.data(), &mut bytes);
    write_file(&blob, &bytes)
}

fn read_raw(sidecar: &Path, kind: RawKind) -> Result<(RawSidecar, VolumeGeometry, Vec<u8>)> {
    let (json, blob) = raw_paths(sidecar);
    let meta: RawSidecar = read_json(&json)?;
    if meta.kind != kind {
        return Err(Error::document(
            &json,
            format!("expected {kind:?} volume, found {:?}", meta.kind),
        ));
    }
    let geometry = VolumeGeometry::new(meta.dims, meta.spacing, meta.affine)?;
    let bytes = read_bytes(&blob)?;
    let width = if kind == RawKind::Intensity { 8 } else { 2 };
    let expected = geometry.num_voxels() * width;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((meta, geometry, bytes))
}

pub fn read_raw_intensity(sidecar: impl AsRef<Path>) -> Result<IntensityVolume> {
    let (_, geometry, bytes) = read_raw(sidecar.as_ref(), RawKind::Intensity)?;
    let mut data = vec![0.0; geometry.num_voxels()];
    LittleEndian::read_f64_into(&bytes, &mut data);
    Volume::new(geometry, data)
}

pub fn read_raw_labels(sidecar: impl AsRef<Path>) -> Result<LabelVolume> {
    let (meta, geometry, bytes) = read_raw(sidecar.as_ref(), RawKind::Labels)?;
    let mut data = vec![0u16; geometry.num_voxels()];
    LittleEndian::read_u16_into(&bytes, &mut data);
    let num_labels = meta
        .num_labels
        .ok_or_else(|| Error::document(sidecar.as_ref(), "label sidecar without num_labels"))?;
    LabelVolume::new(geometry, data, num_labels)
}

/// Reads an affine from text: 3 or 4 whitespace-separated rows of 4 numbers.
/// Lines starting with `#` are ignored.
pub fn read_affine_text(path: impl AsRef<Path>) -> Result<AffineTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_affine_text(&text).map_err(|msg| Error::document(path, msg))
}

pub fn parse_affine_text(text: &str) -> std::result::Result<AffineTransform, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<_, _>>()?;
    if !(rows.len() == 3 || rows.len() == 4) || rows.iter().any(|r| r.len() != 4) {
        return Err("expected 3 or 4 rows of 4 numbers".into());
    }
    let m = nalgebra::Matrix4::from_fn(|r, c| {
        if r < rows.len() {
            rows[r][c]
        } else if c == 3 {
            1.0
        } else {
            0.0
        }
    });
    AffineTransform::from_matrix(m).map_err(|e| e.to_string())
}

pub fn write_affine_text(t: &AffineTransform, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for row in t.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    write_file(path.as_ref(), s.as_bytes())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::document(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::document(path, e))
}
