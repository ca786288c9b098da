//! Per-tile segmentation backends.
//!
//! The network that labels each tile lives outside this crate. A backend is
//! either an external process speaking a file protocol, or one of the
//! deterministic oracles used for testing the surrounding machinery.
//!
//! External protocol: for every tile a fresh workspace directory receives
//! `input.nii` (float32 intensities at the extracted tile size) and
//! `tile.json` (the [`TileSpec`] plus the tile geometry). The command template
//! is split like a shell command line and `{input}`, `{output}`, `{spec}` and
//! `{tile}` are substituted in every argument. The process must exit with
//! status 0 after writing a NIfTI-1 label image with the same dims to
//! `{output}`. Any resizing to a fixed network input is the process's job.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{IntensityVolume, LabelVolume, VolumeGeometry};
use crate::io;
use crate::tiling::{extract_tile, TileGrid, TileSpec};

/// Label count of the whole-brain protocol (background plus 132 structures).
pub const DEFAULT_NUM_LABELS: u16 = 133;

#[derive(Debug, Clone)]
pub struct ExternalProcess {
    template: Vec<String>,
    num_labels: u16,
    work_root: Option<PathBuf>,
}

impl ExternalProcess {
    pub fn new(command: &str, num_labels: u16) -> Result<Self> {
        let template = shell_words::split(command)
            .map_err(|e| Error::Backend(format!("cannot parse command {command:?}: {e}")))?;
        Self::from_args(template, num_labels)
    }

    pub fn from_args(template: Vec<String>, num_labels: u16) -> Result<Self> {
        if template.is_empty() {
            return Err(Error::Backend("empty command template".into()));
        }
        for placeholder in ["{input}", "{output}"] {
            if !template.iter().any(|a| a.contains(placeholder)) {
                return Err(Error::Backend(format!(
                    "command template lacks the {placeholder} placeholder"
                )));
            }
        }
        if num_labels < 2 {
            return Err(Error::InvalidLabelCount(num_labels));
        }
        Ok(ExternalProcess {
            template,
            num_labels,
            work_root: None,
        })
    }

    /// Directory under which per-tile workspaces are created (default: system temp).
    pub fn with_work_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.work_root = Some(root.into());
        self
    }

    pub fn template(&self) -> &[String] {
        &self.template
    }

    fn run(&self, input: &IntensityVolume, tile: &TileSpec) -> Result<LabelVolume> {
        let workspace = match &self.work_root {
            Some(root) => {
                fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
                tempfile::Builder::new().prefix("tile-").tempdir_in(root)
            }
            None => tempfile::Builder::new().prefix("slant-tile-").tempdir(),
        }
        .map_err(|e| Error::io(self.work_root.clone().unwrap_or_else(std::env::temp_dir), e))?;
        let dir = workspace.path();
        let input_path = dir.join("input.nii");
        let output_path = dir.join("output.nii");
        let spec_path = dir.join("tile.json");
        io::write_nifti_intensity(input, &input_path)?;
        io::write_json(
            &spec_path,
            &TileDocument {
                tile: *tile,
                geometry: input.geometry().clone(),
                num_labels: self.num_labels,
            },
        )?;
        let args: Vec<String> = self
            .template
            .iter()
            .map(|a| {
                a.replace("{input}", &input_path.to_string_lossy())
                    .replace("{output}", &output_path.to_string_lossy())
                    .replace("{spec}", &spec_path.to_string_lossy())
                    .replace("{tile}", &tile.index.to_string())
            })
            .collect();
        log::debug!("tile {}: running {:?}", tile.index, args);
        let out = Command::new(&args[0])
            .args(&args[1..])
            .current_dir(dir)
            .output()
            .map_err(|e| Error::ExternalProcess {
                status: format!("spawn {:?}", args[0]),
                stderr: e.to_string(),
            })?;
        if !out.status.success() {
            return Err(Error::ExternalProcess {
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        let (labels, _) = io::read_nifti_labels(&output_path, Some(self.num_labels))?;
        if labels.dims() != input.dims() {
            return Err(Error::Backend(format!(
                "output dims {:?} differ from input dims {:?}",
                labels.dims(),
                input.dims()
            )));
        }
        labels.with_geometry(input.geometry().clone())
    }
}

/// Contents of `tile.json` handed to external backends.
#[derive(Debug, Serialize, serde::Deserialize)]
pub struct TileDocument {
    pub tile: TileSpec,
    pub geometry: VolumeGeometry,
    pub num_labels: u16,
}

#[derive(Debug, Clone)]
pub enum Backend {
    External(ExternalProcess),
    /// Labels every voxel of every tile with one value.
    Constant {
        label: u16,
        num_labels: u16,
    },
    /// Answers each tile with the matching box of a known atlas-space label map.
    AtlasPrior {
        prior: Arc<LabelVolume>,
    },
    /// Delegates to `inner` but replaces tile `target` entirely with `label`.
    Corrupting {
        inner: Box<Backend>,
        target: usize,
        label: u16,
    },
}

impl Backend {
    pub fn constant(label: u16, num_labels: u16) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::InvalidLabelCount(num_labels));
        }
        if label >= num_labels {
            return Err(Error::LabelOutOfRange {
                value: label as u64,
                num_labels,
            });
        }
        Ok(Backend::Constant { label, num_labels })
    }

    pub fn atlas_prior(prior: LabelVolume) -> Self {
        Backend::AtlasPrior {
            prior: Arc::new(prior),
        }
    }

    pub fn corrupting(inner: Backend, target: usize, label: u16) -> Result<Self> {
        let num_labels = inner.num_labels();
        if label >= num_labels {
            return Err(Error::LabelOutOfRange {
                value: label as u64,
                num_labels,
            });
        }
        Ok(Backend::Corrupting {
            inner: Box::new(inner),
            target,
            label,
        })
    }

    /// Parses a backend description:
    ///
    /// - `constant:<label>`
    /// - `prior:<labels.nii>`
    /// - `exec:<command template>`
    /// - `corrupt:<tile>:<label>:<inner description>`
    ///
    /// `num_labels` applies to every backend that does not carry its own count.
    pub fn parse(spec: &str, num_labels: u16) -> Result<Self> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| Error::Backend(format!("backend {spec:?} lacks a kind prefix")))?;
        let num = |s: &str, what: &str| -> Result<u64> {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Backend(format!("invalid {what} {s:?} in {spec:?}")))
        };
        match kind {
            "constant" => {
                let label = num(rest, "label")?;
                let label = u16::try_from(label).map_err(|_| Error::LabelOutOfRange {
                    value: label,
                    num_labels,
                })?;
                Self::constant(label, num_labels)
            }
            "prior" => {
                let (prior, _) = io::read_nifti_labels(rest, Some(num_labels))?;
                Ok(Self::atlas_prior(prior))
            }
            "exec" => Ok(Backend::External(ExternalProcess::new(rest, num_labels)?)),
            "corrupt" => {
                let mut parts = rest.splitn(3, ':');
                let (Some(t), Some(l), Some(inner)) = (parts.next(), parts.next(), parts.next())
                else {
                    return Err(Error::Backend(format!(
                        "expected corrupt:<tile>:<label>:<backend>, got {spec:?}"
                    )));
                };
                let target = num(t, "tile index")? as usize;
                let label = num(l, "label")?;
                let label = u16::try_from(label).map_err(|_| Error::LabelOutOfRange {
                    value: label,
                    num_labels,
                })?;
                Self::corrupting(Self::parse(inner, num_labels)?, target, label)
            }
            other => Err(Error::Backend(format!("unknown backend kind {other:?}"))),
        }
    }

    /// Places external-process workspaces under `root`.
    pub fn with_work_root(self, root: &Path) -> Self {
        match self {
            Backend::External(p) => Backend::External(p.with_work_root(root)),
            Backend::Corrupting {
                inner,
                target,
                label,
            } => Backend::Corrupting {
                inner: Box::new(inner.with_work_root(root)),
                target,
                label,
            },
            other => other,
        }
    }

    pub fn num_labels(&self) -> u16 {
        match self {
            Backend::External(p) => p.num_labels,
            Backend::Constant { num_labels, .. } => *num_labels,
            Backend::AtlasPrior { prior } => prior.num_labels(),
            Backend::Corrupting { inner, .. } => inner.num_labels(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            Backend::External(_) => false,
            Backend::Corrupting { inner, .. } => inner.is_deterministic(),
            _ => true,
        }
    }

    /// Stable identity of the backend's behaviour, used to key cached tile outputs.
    pub fn fingerprint(&self) -> String {
        match self {
            Backend::External(p) => format!("exec:{:?}:{}", p.template, p.num_labels),
            Backend::Constant { label, num_labels } => format!("constant:{label}:{num_labels}"),
            Backend::AtlasPrior { prior } => {
                let mut h = Sha256::new();
                for v in prior.data() {
                    h.update(v.to_le_bytes());
                }
                h.update(format!("{:?}", prior.dims()).as_bytes());
                format!("prior:{}:{}", hex(&h.finalize()), prior.num_labels())
            }
            Backend::Corrupting {
                inner,
                target,
                label,
            } => {
                format!("corrupt:{target}:{label}:{}", inner.fingerprint())
            }
        }
    }

    /// Labels one tile. `input` must have exactly `tile.size` voxels.
    pub fn segment_tile(&self, input: &IntensityVolume, tile: &TileSpec) -> Result<LabelVolume> {
        if input.dims() != tile.size {
            return Err(Error::GeometryMismatch(format!(
                "tile input dims {:?} differ from tile size {:?}",
                input.dims(),
                tile.size
            )));
        }
        match self {
            Backend::External(p) => p.run(input, tile),
            Backend::Constant { label, num_labels } => LabelVolume::new(
                input.geometry().clone(),
                vec![*label; input.data().len()],
                *num_labels,
            ),
            Backend::AtlasPrior { prior } => prior
                .extract(tile.origin, tile.size)?
                .with_geometry(input.geometry().clone()),
            Backend::Corrupting {
                inner,
                target,
                label,
            } => {
                let out = inner.segment_tile(input, tile)?;
                if tile.index == *target {
                    LabelVolume::new(
                        out.geometry().clone(),
                        vec![*label; out.data().len()],
                        out.num_labels(),
                    )
                } else {
                    Ok(out)
                }
            }
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::External(p) => write!(f, "exec:{}", shell_words::join(&p.template)),
            Backend::Constant { label, .. } => write!(f, "constant:{label}"),
            Backend::AtlasPrior { prior } => write!(f, "prior:<{:?}>", prior.dims()),
            Backend::Corrupting {
                inner,
                target,
                label,
            } => {
                write!(f, "corrupt:{target}:{label}:{inner}")
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// The first failing tile (in grid order) fails the whole run.
    #[default]
    Abort,
    /// A failing tile is replaced by all-background and a warning is logged.
    Background,
}

#[derive(Debug, Clone, Default)]
pub struct SegmentOptions {
    pub failure: FailurePolicy,
    /// Directory of content-addressed tile outputs reused across runs.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SegmentStats {
    pub cache_hits: usize,
    pub substituted: Vec<usize>,
}

fn cache_key(backend: &Backend, tile: &TileSpec, input: &IntensityVolume) -> String {
    let mut h = Sha256::new();
    h.update(backend.fingerprint().as_bytes());
    h.update(serde_json::to_vec(tile).expect("tile spec serializes"));
    h.update(serde_json::to_vec(input.geometry()).expect("geometry serializes"));
    for v in input.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

fn segment_cached(
    backend: &Backend,
    input: &IntensityVolume,
    tile: &TileSpec,
    cache_dir: Option<&Path>,
) -> Result<(LabelVolume, bool)> {
    let Some(dir) = cache_dir else {
        return Ok((backend.segment_tile(input, tile)?, false));
    };
    let path = dir.join(format!("{}.nii", cache_key(backend, tile, input)));
    if path.is_file() {
        if let Ok((labels, _)) = io::read_nifti_labels(&path, Some(backend.num_labels())) {
            if labels.dims() == input.dims() {
                return Ok((labels.with_geometry(input.geometry().clone())?, true));
            }
        }
        log::warn!("ignoring unreadable cache entry {}", path.display());
    }
    let labels = backend.segment_tile(input, tile)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension(format!("tmp{}", tile.index));
    io::write_nifti_labels(&labels, &tmp)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok((labels, false))
}

/// Segments every tile of `grid` independently, returning outputs in grid order.
pub fn segment_all(
    backend: &Backend,
    atlas_vol: &IntensityVolume,
    grid: &TileGrid,
) -> Result<Vec<LabelVolume>> {
    segment_all_with(backend, atlas_vol, grid, &SegmentOptions::default()).map(|(v, _)| v)
}

/// Runs on the current rayon pool; results do not depend on scheduling.
pub fn segment_all_with(
    backend: &Backend,
    atlas_vol: &IntensityVolume,
    grid: &TileGrid,
    options: &SegmentOptions,
) -> Result<(Vec<LabelVolume>, SegmentStats)> {
    if atlas_vol.dims() != grid.atlas_dims() {
        return Err(Error::GeometryMismatch(format!(
            "volume dims {:?} differ from grid atlas dims {:?}",
            atlas_vol.dims(),
            grid.atlas_dims()
        )));
    }
    let num_labels = backend.num_labels();
    let results: Vec<Result<(LabelVolume, bool)>> = grid
        .tiles()
        .par_iter()
        .map(|tile| {
            let input = extract_tile(atlas_vol, tile)?;
            let (labels, hit) =
                segment_cached(backend, &input, tile, options.cache_dir.as_deref())?;
            if labels.num_labels() != num_labels {
                return Err(Error::Backend(format!(
                    "tile reports {} labels, run uses {num_labels}",
                    labels.num_labels()
                )));
            }
            Ok((labels, hit))
        })
        .collect();
    let mut stats = SegmentStats::default();
    let mut out = Vec::with_capacity(results.len());
    for (tile, result) in grid.tiles().iter().zip(results) {
        match result {
            Ok((labels, hit)) => {
                stats.cache_hits += hit as usize;
                out.push(labels);
            }
            Err(e) if options.failure == FailurePolicy::Background => {
                log::warn!("tile {} failed ({e}); substituting background", tile.index);
                let geometry = atlas_vol.geometry().sub_grid(tile.origin, tile.size)?;
                stats.substituted.push(tile.index);
                out.push(LabelVolume::background(geometry, num_labels)?);
            }
            Err(e) => {
                return Err(Error::Tile {
                    tile: tile.index,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok((out, stats))
}
