use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slant_core::error::Error;
use slant_core::evaluate;
use slant_core::fusion::{fuse, FusionMode};
use slant_core::geometry::ATLAS_DIMS;
use slant_core::harmonize::{HarmonizationModel, DEFAULT_QUANTILE_COUNT};
use slant_core::io;
use slant_core::pipeline::{
    self, AffineSource, PipelineConfig, PipelineError, Stage, StageContext,
};
use slant_core::segmenter::FailurePolicy;
use slant_core::tiling::TileGrid;

#[derive(Parser)]
#[command(
    name = "slant",
    version,
    about = "Tiled whole-brain segmentation pipeline"
)]
struct Cli {
    /// Log more (repeat for debug output)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the harmonization reference profile and prior mask from atlases
    FitHarmonization {
        /// Atlas intensity images in atlas space
        #[arg(long = "atlas", required = true)]
        atlases: Vec<PathBuf>,
        /// Brain masks, one per atlas, in the same order
        #[arg(long = "mask", required = true)]
        masks: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_QUANTILE_COUNT)]
        quantiles: usize,
        /// Model directory to create
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the full pipeline on one scan
    Run {
        input: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Cut an atlas-space image into tiles
    Tile {
        input: PathBuf,
        #[command(flatten)]
        grid: GridOpts,
        /// Concatenation fusion: default tile size becomes an exact partition
        #[arg(long, default_value = "majority")]
        fusion: FusionMode,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fuse seg_NNN.nii tile segmentations from a tile directory
    Fuse {
        /// Directory produced by `tile`, with segmentations added
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long, default_value_t = 133)]
        labels: u16,
        #[arg(long, default_value = "majority")]
        fusion: FusionMode,
        #[arg(long)]
        output: PathBuf,
    },
    /// Per-label Dice between an automatic and a manual segmentation
    Evaluate {
        automatic: PathBuf,
        manual: PathBuf,
        /// Label count; inferred from the data when omitted
        #[arg(long)]
        labels: Option<u16>,
        /// Write the per-label table (tab separated)
        #[arg(long)]
        table: Option<PathBuf>,
        /// Write the full report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print tile origins and coverage statistics
    GridInfo {
        #[command(flatten)]
        grid: GridOpts,
        #[arg(long, default_value = "majority")]
        fusion: FusionMode,
        #[arg(long, value_parser = parse_triple, default_value = "172,220,156")]
        atlas_dims: [usize; 3],
        /// Emit the grid document as JSON
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct GridOpts {
    /// Tiles per axis, e.g. 3,3,3
    #[arg(long, value_parser = parse_triple)]
    grid: Option<[usize; 3]>,
    /// Tile extent in voxels, e.g. 96,128,88
    #[arg(long, value_parser = parse_triple)]
    tile_size: Option<[usize; 3]>,
}

#[derive(Args)]
struct RunOpts {
    /// TOML configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    grid: GridOpts,
    /// Harmonization model directory, or "skip"
    #[arg(long)]
    harmonization: Option<String>,
    /// constant:<label> | prior:<labels.nii> | exec:<command> | corrupt:<tile>:<label>:<backend>
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    labels: Option<u16>,
    /// Affine text file (atlas world -> native world), "identity", or "estimate"
    #[arg(long)]
    affine: Option<String>,
    /// Atlas-space template for --affine estimate
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Replace failing tiles with background instead of aborting
    #[arg(long)]
    background_on_failure: bool,
    /// Ignore cached tile outputs from earlier runs
    #[arg(long)]
    no_resume: bool,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected three comma-separated integers, got {s:?}"
        ));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("invalid integer {p:?}"))?;
    }
    Ok(out)
}

fn run_config(opts: RunOpts) -> Result<PipelineConfig, Error> {
    let mut cfg = match &opts.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(g) = opts.grid.grid {
        cfg.grid = g;
    }
    if let Some(t) = opts.grid.tile_size {
        cfg.tile_size = Some(t);
    }
    match opts.harmonization.as_deref() {
        Some("skip") => cfg.harmonization = None,
        Some(p) => cfg.harmonization = Some(p.into()),
        None => {}
    }
    if let Some(b) = opts.backend {
        cfg.backend = b;
    }
    if let Some(l) = opts.labels {
        cfg.num_labels = l;
    }
    match opts.affine.as_deref() {
        Some("identity") => cfg.affine = AffineSource::Identity,
        Some("estimate") => {
            let template = opts
                .template
                .ok_or_else(|| Error::Config("--affine estimate needs --template".into()))?;
            cfg.affine = AffineSource::Estimate(template);
        }
        Some(p) => cfg.affine = AffineSource::File(p.into()),
        None => {}
    }
    if let Some(j) = opts.jobs {
        cfg.jobs = j;
    }
    if let Some(f) = opts.fusion {
        cfg.fusion = f;
    }
    if let Some(o) = opts.output {
        cfg.output_dir = o;
    }
    if opts.background_on_failure {
        cfg.on_tile_failure = FailurePolicy::Background;
    }
    if opts.no_resume {
        cfg.resume = false;
    }
    Ok(cfg)
}

fn grid_from(opts: &GridOpts, fusion: FusionMode, dims: [usize; 3]) -> Result<TileGrid, Error> {
    let cfg = PipelineConfig {
        grid: opts.grid.unwrap_or([3, 3, 3]),
        tile_size: opts.tile_size,
        fusion,
        ..Default::default()
    };
    cfg.build_grid(dims)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::FitHarmonization {
            atlases,
            masks,
            quantiles,
            output,
        } => {
            if atlases.len() != masks.len() {
                return Err(Error::Config(format!(
                    "{} atlases but {} masks",
                    atlases.len(),
                    masks.len()
                )))
                .stage(Stage::Config);
            }
            let vols = atlases
                .iter()
                .map(|p| io::read_nifti_intensity(p).map(|(v, _)| v))
                .collect::<Result<Vec<_>, _>>()
                .stage(Stage::Io)?;
            let masks = masks
                .iter()
                .map(io::read_nifti_mask)
                .collect::<Result<Vec<_>, _>>()
                .stage(Stage::Io)?;
            let model =
                HarmonizationModel::fit(&vols, &masks, quantiles).stage(Stage::Harmonization)?;
            model.save(&output).stage(Stage::Io)?;
            println!(
                "harmonization model: {} quantiles, {} mask voxels -> {}",
                model.quantile_count(),
                model.mask().count_true(),
                output.display()
            );
        }
        Command::Run { input, opts } => {
            let cfg = run_config(opts).stage(Stage::Config)?;
            let report = pipeline::run(&cfg, &input)?;
            for t in &report.timings {
                println!("{:<22}{:>9.3} s", t.stage, t.seconds);
            }
            if let Some(fit) = report.harmonization {
                println!(
                    "beta1 {:.6}  beta0 {:.6}  residual {:.6}",
                    fit.beta1, fit.beta0, fit.residual_rms
                );
            }
            println!(
                "tiles {}  ties {}  coverage min {} max {} mean {:.3}",
                report.grid.tiles,
                report.tie_count,
                report.coverage.min,
                report.coverage.max,
                report.coverage.mean
            );
            println!("native labels: {}", report.outputs.native_labels.display());
        }
        Command::Tile {
            input,
            grid,
            fusion,
            output,
        } => {
            let (vol, _) = io::read_nifti_intensity(&input).stage(Stage::Io)?;
            let grid = grid_from(&grid, fusion, vol.dims()).stage(Stage::Tiling)?;
            pipeline::write_tiles(&vol, &grid, &output).stage(Stage::Io)?;
            println!("{} tiles written to {}", grid.len(), output.display());
        }
        Command::Fuse {
            tiles,
            labels,
            fusion,
            output,
        } => {
            let (grid, atlas, segs) = pipeline::read_tile_segs(&tiles, labels).stage(Stage::Io)?;
            let result = fuse(fusion, &segs, &grid, &atlas, labels).stage(Stage::Fusion)?;
            io::write_nifti_labels(&result.fused, &output).stage(Stage::Io)?;
            let stats = result.coverage_used.stats();
            println!(
                "fused {} tiles: ties {}  coverage min {} max {}",
                grid.len(),
                result.tie_count,
                stats.min,
                stats.max
            );
        }
        Command::Evaluate {
            automatic,
            manual,
            labels,
            table,
            json,
        } => {
            let (auto, _) = io::read_nifti_labels(&automatic, labels).stage(Stage::Io)?;
            let (manual, _) = io::read_nifti_labels(&manual, labels).stage(Stage::Io)?;
            let report = evaluate::report(&auto, &manual).stage(Stage::Evaluation)?;
            if let Some(path) = table {
                std::fs::write(&path, report.to_table())
                    .map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })
                    .stage(Stage::Io)?;
            }
            if let Some(path) = json {
                io::write_json(&path, &report).stage(Stage::Io)?;
            }
            println!("{}", report.summary_line());
        }
        Command::GridInfo {
            grid,
            fusion,
            atlas_dims,
            json,
        } => {
            let grid = grid_from(&grid, fusion, atlas_dims).stage(Stage::Tiling)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&grid).expect("grid serializes")
                );
            } else {
                let s = grid.summary();
                println!(
                    "atlas dims {:?}  grid {:?}  tile size {:?}",
                    s.atlas_dims, s.grid, s.tile_size
                );
                for (axis, name) in ["x", "y", "z"].iter().enumerate() {
                    println!("{name} origins {:?}", s.origins[axis]);
                }
                println!(
                    "tiles {}  partition {}  coverage min {} max {} mean {:.3}  voxels with coverage >= 3: {}",
                    s.tiles, s.partition, s.coverage.min, s.coverage.max, s.coverage.mean, s.coverage.voxels_ge3
                );
                if atlas_dims == ATLAS_DIMS {
                    let cov = grid.coverage_map();
                    println!(
                        "center voxel coverage {}",
                        cov.get(atlas_dims[0] / 2, atlas_dims[1] / 2, atlas_dims[2] / 2)
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
