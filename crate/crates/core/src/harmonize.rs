//! Sorted-intensity regression harmonization.
//!
//! A scan is z-scored over all voxels, its intensities inside a prior mask are
//! sorted from largest to smallest and resampled to a fixed number of quantile
//! positions, and a 1-D least-squares line maps that profile onto the mean
//! profile of the atlases. The fitted line is then applied to every voxel.
//!
//! Masked voxel counts differ between scans, so every profile is resampled
//! onto `quantile_count` evenly spaced positions (endpoints inclusive) by
//! linear interpolation before profiles are averaged or regressed.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{IntensityVolume, Mask, Volume, VolumeGeometry};
use crate::io;

pub const DEFAULT_QUANTILE_COUNT: usize = 1024;

/// Reference profile and prior mask learned from a set of atlases.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizationModel {
    mean_sorted: Vec<f64>,
    mask: Mask,
}

/// Slope, intercept and RMS residual of the profile regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub beta1: f64,
    pub beta0: f64,
    pub residual_rms: f64,
}

/// Z-scores a volume over all voxels (population standard deviation).
pub fn standardize(vol: &IntensityVolume) -> Result<IntensityVolume> {
    let data = vol.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !std.is_finite() || std <= 0.0 {
        return Err(Error::ZeroVariance("volume is constant".into()));
    }
    let mut out: Vec<f64> = data.iter().map(|v| (v - mean) / std).collect();
    // one correction pass absorbs the round-off left in the first pass
    let mean2 = out.iter().sum::<f64>() / n;
    let std2 = (out.iter().map(|v| (v - mean2).powi(2)).sum::<f64>() / n).sqrt();
    for v in &mut out {
        *v = (*v - mean2) / std2;
    }
    Volume::new(vol.geometry().clone(), out)
}

/// Resamples a descending sequence onto `q` evenly spaced positions.
fn quantile_resample(sorted_desc: &[f64], q: usize) -> Vec<f64> {
    let n = sorted_desc.len();
    if n == 1 {
        return vec![sorted_desc[0]; q];
    }
    (0..q)
        .map(|j| {
            let pos = j as f64 * (n - 1) as f64 / (q - 1) as f64;
            let lo = pos.floor() as usize;
            let t = pos - lo as f64;
            if t == 0.0 || lo + 1 >= n {
                sorted_desc[lo.min(n - 1)]
            } else {
                let (a, b) = (sorted_desc[lo], sorted_desc[lo + 1]);
                // a >= b; keep the result inside [b, a]
                (a + (b - a) * t).clamp(b, a)
            }
        })
        .collect()
}

/// Masked intensities sorted largest first and resampled to `quantile_count` values.
pub fn sorted_intensities(
    vol: &IntensityVolume,
    mask: &Mask,
    quantile_count: usize,
) -> Result<Vec<f64>> {
    if quantile_count < 2 {
        return Err(Error::Config(format!(
            "quantile count must be >= 2, got {quantile_count}"
        )));
    }
    vol.geometry()
        .ensure_same_grid(mask.geometry(), "volume vs mask")?;
    let mut values: Vec<f64> = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyMask);
    }
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(quantile_resample(&values, quantile_count))
}

/// Least squares fit of `y ≈ beta1 * x + beta0`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<RegressionFit> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx.is_nan() || sxx <= 0.0 {
        return Err(Error::ZeroVariance(
            "sorted profile inside the mask is flat".into(),
        ));
    }
    let beta1 = sxy / sxx;
    let beta0 = my - beta1 * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - beta1 * a - beta0).powi(2))
        .sum();
    Ok(RegressionFit {
        beta1,
        beta0,
        residual_rms: (sse / n).sqrt(),
    })
}

impl HarmonizationModel {
    pub fn new(mean_sorted: Vec<f64>, mask: Mask) -> Result<Self> {
        if mean_sorted.len() < 2 {
            return Err(Error::Config(
                "reference profile needs at least 2 quantiles".into(),
            ));
        }
        if mean_sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "reference profile has non-finite entries".into(),
            ));
        }
        if mean_sorted.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(
                "reference profile must be non-increasing".into(),
            ));
        }
        if mask.count_true() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(HarmonizationModel { mean_sorted, mask })
    }

    /// Learns the union mask and mean profile from atlas scans and their masks.
    pub fn fit(atlases: &[IntensityVolume], masks: &[Mask], quantile_count: usize) -> Result<Self> {
        if atlases.is_empty() {
            return Err(Error::EmptyInput("no atlas volumes".into()));
        }
        if masks.len() != atlases.len() {
            return Err(Error::EmptyInput(format!(
                "{} atlases but {} masks",
                atlases.len(),
                masks.len()
            )));
        }
        let geometry = atlases[0].geometry();
        for (i, (a, m)) in atlases.iter().zip(masks).enumerate() {
            geometry.ensure_same_grid(a.geometry(), &format!("atlas {i}"))?;
            geometry.ensure_same_grid(m.geometry(), &format!("mask {i}"))?;
        }
        let union: Vec<bool> = (0..geometry.num_voxels())
            .map(|i| masks.iter().any(|m| m.data()[i]))
            .collect();
        let union = Volume::new(geometry.clone(), union)?;
        let mut sum = vec![0.0; quantile_count];
        for atlas in atlases {
            let profile = sorted_intensities(&standardize(atlas)?, &union, quantile_count)?;
            for (s, p) in sum.iter_mut().zip(&profile) {
                *s += p;
            }
        }
        let n = atlases.len() as f64;
        let mut mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
        // averaging can break monotonicity by an ulp
        for j in 1..mean.len() {
            if mean[j] > mean[j - 1] {
                mean[j] = mean[j - 1];
            }
        }
        Self::new(mean, union)
    }

    pub fn mean_sorted(&self) -> &[f64] {
        &self.mean_sorted
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn quantile_count(&self) -> usize {
        self.mean_sorted.len()
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        self.mask.geometry()
    }

    /// Regresses the reference profile on the scan's profile.
    pub fn fit_scan(&self, standardized: &IntensityVolume) -> Result<RegressionFit> {
        let profile = sorted_intensities(standardized, &self.mask, self.quantile_count())?;
        fit_line(&profile, &self.mean_sorted)
    }

    /// Standardizes `vol`, fits the profile regression and applies it to every voxel.
    pub fn apply(&self, vol: &IntensityVolume) -> Result<(IntensityVolume, RegressionFit)> {
        vol.geometry()
            .ensure_same_grid(self.geometry(), "scan vs harmonization model")?;
        let standardized = standardize(vol)?;
        let fit = self.fit_scan(&standardized)?;
        let data = standardized
            .data()
            .iter()
            .map(|v| fit.beta1 * v + fit.beta0)
            .collect();
        Ok((Volume::new(vol.geometry().clone(), data)?, fit))
    }

    /// Writes `model.json`, `mean_sorted.bin` (little-endian f64) and `mask.nii` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ModelDoc {
            quantile_count: self.quantile_count(),
            geometry: self.geometry().clone(),
            mask_voxels: self.mask.count_true(),
            mean_sorted: "mean_sorted.bin".into(),
            mask: "mask.nii".into(),
        };
        io::write_json(dir.join("model.json"), &meta)?;
        let mut bytes = vec![0u8; self.mean_sorted.len() * 8];
        LittleEndian::write_f64_into(&self.mean_sorted, &mut bytes);
        let bin = dir.join(&meta.mean_sorted);
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        io::write_nifti_mask(&self.mask, dir.join(&meta.mask))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("model.json");
        let meta: ModelDoc = io::read_json(&meta_path)?;
        let bin = dir.join(&meta.mean_sorted);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != meta.quantile_count * 8 {
            return Err(Error::Truncated {
                expected: meta.quantile_count * 8,
                actual: bytes.len(),
            });
        }
        let mut mean_sorted = vec![0.0; meta.quantile_count];
        LittleEndian::read_f64_into(&bytes, &mut mean_sorted);
        let mask = io::read_nifti_mask(dir.join(&meta.mask))?;
        // NIfTI stores the affine in f32; restore the exact grid from the metadata
        if !mask.geometry().same_grid(&meta.geometry, 1e-4) {
            return Err(Error::document(
                &meta_path,
                "mask geometry disagrees with model.json",
            ));
        }
        let mask = mask.with_geometry(meta.geometry)?;
        Self::new(mean_sorted, mask)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    quantile_count: usize,
    geometry: VolumeGeometry,
    mask_voxels: usize,
    mean_sorted: String,
    mask: String,
}

pub fn fit_model(
    atlases: &[IntensityVolume],
    masks: &[Mask],
    quantile_count: usize,
) -> Result<HarmonizationModel> {
    HarmonizationModel::fit(atlases, masks, quantile_count)
}

pub fn harmonize(
    vol: &IntensityVolume,
    model: &HarmonizationModel,
) -> Result<(IntensityVolume, RegressionFit)> {
    model.apply(vol)
}
