//! End-to-end run: native scan -> atlas space -> harmonization -> tiles ->
//! per-tile segmentation -> fusion -> back to native space.
//!
//! Bias-field correction is expected to have been applied to the input
//! beforehand; it is not a stage here.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionMode};
use crate::geometry::{
    atlas_geometry, estimate_affine_moments, resample_intensity, resample_labels, AffineTransform,
    IntensityVolume, LabelVolume, VolumeGeometry,
};
use crate::harmonize::{HarmonizationModel, RegressionFit};
use crate::io;
use crate::segmenter::{
    segment_all_with, Backend, FailurePolicy, SegmentOptions, SegmentStats, DEFAULT_NUM_LABELS,
};
use crate::tiling::{CoverageStats, GridSummary, TileGrid, SLANT27_TILE_SIZE};

/// Pipeline stage families; each maps to its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Io,
    Registration,
    Harmonization,
    Tiling,
    Segmentation,
    Fusion,
    Evaluation,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Io => 3,
            Stage::Registration => 4,
            Stage::Harmonization => 5,
            Stage::Tiling => 6,
            Stage::Segmentation => 7,
            Stage::Fusion => 8,
            Stage::Evaluation => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Io => "io",
            Stage::Registration => "registration",
            Stage::Harmonization => "harmonization",
            Stage::Tiling => "tiling",
            Stage::Segmentation => "segmentation",
            Stage::Fusion => "fusion",
            Stage::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} stage: {source}", stage.name())]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

/// Where the atlas-to-native transform comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineSource {
    /// The scan already lives in atlas world coordinates.
    #[default]
    Identity,
    /// Text file with the 4x4 matrix mapping atlas world to native world.
    File(PathBuf),
    /// Moments-based estimate against an atlas-space template image.
    Estimate(PathBuf),
}

fn default_grid() -> [usize; 3] {
    [3, 3, 3]
}
fn default_backend() -> String {
    "constant:0".into()
}
fn default_labels() -> u16 {
    DEFAULT_NUM_LABELS
}
fn default_jobs() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("slant-out")
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// NIfTI image whose grid defines atlas space; the built-in atlas grid when absent.
    #[serde(default)]
    pub atlas_reference: Option<PathBuf>,
    #[serde(default = "default_grid")]
    pub grid: [usize; 3],
    /// Tile extent; defaults to 96x128x88 for majority fusion and to an
    /// exact partition for concatenation.
    #[serde(default)]
    pub tile_size: Option<[usize; 3]>,
    /// Directory written by `fit-harmonization`; harmonization is skipped when absent.
    #[serde(default)]
    pub harmonization: Option<PathBuf>,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_labels")]
    pub num_labels: u16,
    #[serde(default)]
    pub affine: AffineSource,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub on_tile_failure: FailurePolicy,
    /// Reuse content-addressed tile outputs from earlier runs.
    #[serde(default = "default_true")]
    pub resume: bool,
    /// Defaults to `<output_dir>/.work`.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            atlas_reference: None,
            grid: default_grid(),
            tile_size: None,
            harmonization: None,
            backend: default_backend(),
            num_labels: default_labels(),
            affine: AffineSource::Identity,
            jobs: 1,
            output_dir: default_output(),
            fusion: FusionMode::Majority,
            on_tile_failure: FailurePolicy::Abort,
            resume: true,
            work_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::document(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn atlas_geometry(&self) -> Result<VolumeGeometry> {
        match &self.atlas_reference {
            None => Ok(atlas_geometry()),
            Some(p) => Ok(io::read_nifti_intensity(p)?.0.geometry().clone()),
        }
    }

    pub fn build_grid(&self, atlas_dims: [usize; 3]) -> Result<TileGrid> {
        match (self.tile_size, self.fusion) {
            (Some(size), _) => TileGrid::build(atlas_dims, self.grid, size),
            (None, FusionMode::Concatenate) => TileGrid::partition(atlas_dims, self.grid),
            (None, FusionMode::Majority) => {
                TileGrid::build(atlas_dims, self.grid, SLANT27_TILE_SIZE)
            }
        }
    }

    pub fn validate(&self, grid: &TileGrid) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::InvalidLabelCount(self.num_labels));
        }
        if self.fusion == FusionMode::Concatenate && !grid.is_partition() {
            return Err(Error::Config(
                "concatenation fusion needs a non-overlapping partition grid".into(),
            ));
        }
        Ok(())
    }

    pub fn work_dir(&self) -> PathBuf {
        self.work_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join(".work"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutputs {
    pub atlas_labels: PathBuf,
    pub native_labels: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub input: PathBuf,
    pub backend: String,
    pub jobs: usize,
    pub fusion: FusionMode,
    pub affine: AffineTransform,
    pub harmonization: Option<RegressionFit>,
    pub grid: GridSummary,
    pub tie_count: usize,
    /// Statistics of the votes actually cast per voxel.
    pub coverage: CoverageStats,
    pub coverage_matches_grid: bool,
    pub segmentation: SegmentStats,
    pub timings: Vec<StageTiming>,
    pub outputs: RunOutputs,
}

/// Maps atlas-space labels back onto the native grid by nearest neighbour.
/// `forward` maps atlas world coordinates to native world coordinates (the
/// transform used to pull the scan into atlas space).
pub fn inverse_transform_labels(
    fused: &LabelVolume,
    forward: &AffineTransform,
    native: &VolumeGeometry,
) -> LabelVolume {
    resample_labels(fused, &forward.inverse(), native)
}

struct Timer {
    timings: Vec<StageTiming>,
    start: Instant,
}

impl Timer {
    fn new() -> Self {
        Timer {
            timings: Vec::new(),
            start: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: (now - self.start).as_secs_f64(),
        });
        self.start = now;
    }
}

/// Output files are written under a temporary name and renamed at the end;
/// dropping a guard that was never committed deletes its partial file.
struct PendingFile {
    partial: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl PendingFile {
    fn new(target: PathBuf) -> Self {
        let mut partial = target.clone().into_os_string();
        partial.push(".partial");
        PendingFile {
            partial: partial.into(),
            target,
            committed: false,
        }
    }

    fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.partial, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for PendingFile {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_file(&self.partial);
        }
    }
}

fn resolve_affine(source: &AffineSource, native: &IntensityVolume) -> Result<AffineTransform> {
    match source {
        AffineSource::Identity => Ok(AffineTransform::identity()),
        AffineSource::File(p) => io::read_affine_text(p),
        AffineSource::Estimate(template) => {
            let (template, _) = io::read_nifti_intensity(template)?;
            estimate_affine_moments(native, &template)
        }
    }
}

/// Runs the pipeline with the backend named in `config.backend`.
pub fn run(config: &PipelineConfig, input: &Path) -> std::result::Result<RunReport, PipelineError> {
    let backend = Backend::parse(&config.backend, config.num_labels).stage(Stage::Config)?;
    run_with_backend(config, &backend, input)
}

pub fn run_with_backend(
    config: &PipelineConfig,
    backend: &Backend,
    input: &Path,
) -> std::result::Result<RunReport, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
        .stage(Stage::Config)?;
    pool.install(|| run_inner(config, backend, input))
}

fn run_inner(
    config: &PipelineConfig,
    backend: &Backend,
    input: &Path,
) -> std::result::Result<RunReport, PipelineError> {
    let mut timer = Timer::new();
    let atlas = config.atlas_geometry().stage(Stage::Config)?;
    let grid = config.build_grid(atlas.dims()).stage(Stage::Tiling)?;
    config.validate(&grid).stage(Stage::Config)?;
    if backend.num_labels() != config.num_labels {
        return Err(Error::Config(format!(
            "backend produces {} labels, configuration expects {}",
            backend.num_labels(),
            config.num_labels
        )))
        .stage(Stage::Config);
    }
    let model = config
        .harmonization
        .as_ref()
        .map(HarmonizationModel::load)
        .transpose()
        .stage(Stage::Harmonization)?;
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(&config.output_dir, e))
        .stage(Stage::Io)?;
    let work_dir = config.work_dir();
    let backend = backend.clone().with_work_root(&work_dir.join("backend"));

    let (native, _) = io::read_nifti_intensity(input).stage(Stage::Io)?;
    timer.lap("load");

    let affine = resolve_affine(&config.affine, &native).stage(Stage::Registration)?;
    let mut atlas_vol = resample_intensity(&native, &affine, &atlas);
    timer.lap("registration");

    let mut fit = None;
    if let Some(model) = &model {
        let (harmonized, f) = model.apply(&atlas_vol).stage(Stage::Harmonization)?;
        atlas_vol = harmonized;
        fit = Some(f);
        timer.lap("harmonization");
    }

    let options = SegmentOptions {
        failure: config.on_tile_failure,
        cache_dir: config.resume.then(|| work_dir.join("tiles")),
    };
    let (tile_segs, seg_stats) =
        segment_all_with(&backend, &atlas_vol, &grid, &options).stage(Stage::Segmentation)?;
    timer.lap("segmentation");

    let fusion =
        fuse(config.fusion, &tile_segs, &grid, &atlas, config.num_labels).stage(Stage::Fusion)?;
    drop(tile_segs);
    timer.lap("fusion");

    let native_labels = inverse_transform_labels(&fusion.fused, &affine, native.geometry());
    timer.lap("inverse_registration");

    let atlas_out = PendingFile::new(config.output_dir.join("atlas_labels.nii"));
    let native_out = PendingFile::new(config.output_dir.join("native_labels.nii"));
    let report_out = PendingFile::new(config.output_dir.join("report.json"));
    io::write_nifti_labels(&fusion.fused, &atlas_out.partial).stage(Stage::Io)?;
    io::write_nifti_labels(&native_labels, &native_out.partial).stage(Stage::Io)?;
    timer.lap("write");

    let grid_cov = grid.coverage_map();
    let report = RunReport {
        input: input.to_path_buf(),
        backend: backend.to_string(),
        jobs: config.jobs,
        fusion: config.fusion,
        affine,
        harmonization: fit,
        coverage: fusion.coverage_used.stats(),
        coverage_matches_grid: fusion.coverage_used == grid_cov,
        grid: grid.summary(),
        tie_count: fusion.tie_count,
        segmentation: seg_stats,
        timings: timer.timings,
        outputs: RunOutputs {
            atlas_labels: atlas_out.target.clone(),
            native_labels: native_out.target.clone(),
            report: report_out.target.clone(),
        },
    };
    io::write_json(&report_out.partial, &report).stage(Stage::Io)?;
    atlas_out.commit().stage(Stage::Io)?;
    native_out.commit().stage(Stage::Io)?;
    report_out.commit().stage(Stage::Io)?;
    Ok(report)
}

/// File name of tile `n`'s intensity input in a tile directory.
pub fn tile_input_name(n: usize) -> String {
    format!("tile_{n:03}.nii")
}

/// File name of tile `n`'s segmentation in a tile directory.
pub fn tile_seg_name(n: usize) -> String {
    format!("seg_{n:03}.nii")
}

/// Writes every tile of `vol` plus `grid.json` and `atlas.json` into `dir`.
pub fn write_tiles(vol: &IntensityVolume, grid: &TileGrid, dir: &Path) -> Result<()> {
    if vol.dims() != grid.atlas_dims() {
        return Err(Error::GeometryMismatch(format!(
            "volume dims {:?} differ from grid atlas dims {:?}",
            vol.dims(),
            grid.atlas_dims()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(dir.join("grid.json"), grid)?;
    io::write_json(dir.join("atlas.json"), vol.geometry())?;
    for tile in grid.tiles() {
        let sub = crate::tiling::extract_tile(vol, tile)?;
        io::write_nifti_intensity(&sub, dir.join(tile_input_name(tile.index)))?;
        io::write_json(dir.join(format!("tile_{:03}.json", tile.index)), tile)?;
    }
    Ok(())
}

/// Reads `grid.json`, `atlas.json` and every `seg_NNN.nii` from a tile directory.
pub fn read_tile_segs(
    dir: &Path,
    num_labels: u16,
) -> Result<(TileGrid, VolumeGeometry, Vec<LabelVolume>)> {
    let grid: TileGrid = io::read_json(dir.join("grid.json"))?;
    let atlas: VolumeGeometry = io::read_json(dir.join("atlas.json"))?;
    let segs = grid
        .tiles()
        .iter()
        .map(|t| {
            let (seg, _) =
                io::read_nifti_labels(dir.join(tile_seg_name(t.index)), Some(num_labels))?;
            Ok(seg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, atlas, segs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Volume;

    #[test]
    fn exit_codes_are_distinct() {
        let stages = [
            Stage::Config,
            Stage::Io,
            Stage::Registration,
            Stage::Harmonization,
            Stage::Tiling,
            Stage::Segmentation,
            Stage::Fusion,
            Stage::Evaluation,
        ];
        let mut codes: Vec<i32> = stages.iter().map(|s| s.exit_code()).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), stages.len());
        assert!(codes.iter().all(|&c| c > 1));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = PipelineConfig {
            affine: AffineSource::File("a.txt".into()),
            tile_size: Some([4, 4, 4]),
            harmonization: Some("model".into()),
            jobs: 4,
            ..Default::default()
        };
        let text = cfg.to_toml();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let minimal: PipelineConfig = toml::from_str(
            "backend = \"constant:1\"\nfusion = \"concatenate\"\ngrid = [2, 2, 2]\n",
        )
        .unwrap();
        assert_eq!(minimal.fusion, FusionMode::Concatenate);
        assert_eq!(minimal.affine, AffineSource::Identity);
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = PipelineConfig {
            fusion: FusionMode::Concatenate,
            tile_size: Some([96, 128, 88]),
            ..Default::default()
        };
        let grid = cfg.build_grid([172, 220, 156]).unwrap();
        assert!(cfg.validate(&grid).is_err());
        let cfg = PipelineConfig {
            fusion: FusionMode::Concatenate,
            grid: [2, 2, 2],
            ..Default::default()
        };
        let grid = cfg.build_grid([172, 220, 156]).unwrap();
        assert_eq!(grid, TileGrid::slant8());
        assert!(cfg.validate(&grid).is_ok());
        let cfg = PipelineConfig {
            jobs: 0,
            ..Default::default()
        };
        assert!(cfg.validate(&TileGrid::slant27()).is_err());
    }

    #[test]
    fn inverse_of_integer_shift() {
        let g = VolumeGeometry::diagonal([10, 8, 6], [1.0; 3]).unwrap();
        let labels = LabelVolume::new(
            g.clone(),
            Volume::from_fn(g.clone(), |[x, y, z]| ((x + y + z) % 5) as u16)
                .unwrap()
                .into_data(),
            5,
        )
        .unwrap();
        let fwd = AffineTransform::translation([2.0, -1.0, 0.0]);
        // forward pull-back: atlas voxel v reads native voxel v + (2, -1, 0)
        let native_labels = resample_labels(&labels, &fwd.inverse(), &g);
        let atlas_side = resample_labels(&native_labels, &fwd, &g);
        let back = inverse_transform_labels(&atlas_side, &fwd, &g);
        for z in 0..6 {
            for y in 1..6 {
                for x in 2..8 {
                    assert_eq!(back.get(x, y, z), native_labels.get(x, y, z));
                }
            }
        }
        assert_eq!(
            inverse_transform_labels(&labels, &AffineTransform::identity(), &g),
            labels
        );
    }

    #[test]
    fn tile_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = VolumeGeometry::diagonal([8, 6, 4], [1.0; 3]).unwrap();
        let vol = Volume::from_fn(g.clone(), |[x, y, z]| (x * 100 + y * 10 + z) as f64).unwrap();
        let grid = TileGrid::build([8, 6, 4], [2, 2, 1], [5, 4, 4]).unwrap();
        write_tiles(&vol, &grid, dir.path()).unwrap();
        for t in grid.tiles() {
            let (sub, _) =
                io::read_nifti_intensity(dir.path().join(tile_input_name(t.index))).unwrap();
            let labels = LabelVolume::new(
                sub.geometry().clone(),
                sub.data().iter().map(|v| (*v as u16) % 7).collect(),
                7,
            )
            .unwrap();
            io::write_nifti_labels(&labels, dir.path().join(tile_seg_name(t.index))).unwrap();
        }
        let (g2, atlas, segs) = read_tile_segs(dir.path(), 7).unwrap();
        assert_eq!(g2, grid);
        assert!(atlas.same_grid(&g, 0.0));
        let fused = crate::fusion::fuse_majority(&segs, &grid, &atlas, 7).unwrap();
        let expect: Vec<u16> = vol.data().iter().map(|v| (*v as u16) % 7).collect();
        assert_eq!(fused.fused.data(), expect.as_slice());
    }
}
