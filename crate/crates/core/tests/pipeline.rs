mod common;

use std::fs;
use std::path::Path;

use common::*;
use slant_core::geometry::{resample_labels, AffineTransform, LabelVolume, VolumeGeometry};
use slant_core::harmonize::HarmonizationModel;
use slant_core::io;
use slant_core::pipeline::{self, inverse_transform_labels, AffineSource, PipelineConfig, Stage};
use slant_core::segmenter::FailurePolicy;
use slant_core::tiling::TileGrid;
use slant_core::FusionMode;

const N: usize = 48;

fn atlas() -> VolumeGeometry {
    VolumeGeometry::new(
        [N; 3],
        [1.0; 3],
        AffineTransform::translation([-24.0, -24.0, -24.0]),
    )
    .unwrap()
}

/// Writes an atlas-space phantom scan, its labels and a harmonization model.
fn setup(dir: &Path) -> LabelVolume {
    let truth = phantom_labels(&atlas());
    let scan = phantom_intensity(&truth);
    io::write_nifti_intensity(&scan, dir.join("scan.nii")).unwrap();
    io::write_nifti_labels(&truth, dir.join("phantom.nii")).unwrap();
    // fit on what the pipeline will read back (float32 on disk)
    let (scan, _) = io::read_nifti_intensity(dir.join("scan.nii")).unwrap();
    HarmonizationModel::fit(&[scan], &[phantom_mask(&truth)], 64)
        .unwrap()
        .save(dir.join("model"))
        .unwrap();
    truth
}

fn config(dir: &Path, backend: String) -> PipelineConfig {
    PipelineConfig {
        atlas_reference: Some(dir.join("scan.nii")),
        tile_size: Some(scaled_tile_size([N; 3])),
        backend,
        num_labels: PHANTOM_LABELS,
        jobs: 2,
        output_dir: dir.join("out"),
        ..Default::default()
    }
}

fn prior(dir: &Path) -> String {
    format!("prior:{}", dir.join("phantom.nii").display())
}

fn read_atlas_labels(cfg: &PipelineConfig) -> LabelVolume {
    io::read_nifti_labels(
        cfg.output_dir.join("atlas_labels.nii"),
        Some(cfg.num_labels),
    )
    .unwrap()
    .0
}

#[test]
fn prior_backend_recovers_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let truth = setup(dir.path());
    let cfg = config(dir.path(), prior(dir.path()));
    let report = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    assert_eq!(read_atlas_labels(&cfg).data(), truth.data());
    let (native, _) = io::read_nifti_labels(&report.outputs.native_labels, None).unwrap();
    assert_eq!(native.data(), truth.data());
    assert_eq!(report.tie_count, 0);
    assert!(report.coverage_matches_grid);
    assert_eq!(report.grid.tiles, 27);
    let stages: Vec<&str> = report.timings.iter().map(|t| t.stage.as_str()).collect();
    assert_eq!(
        stages,
        [
            "load",
            "registration",
            "segmentation",
            "fusion",
            "inverse_registration",
            "write"
        ]
    );
    let json: serde_json::Value = io::read_json(&report.outputs.report).unwrap();
    assert_eq!(json["tie_count"], 0);
    // nothing half-written is left behind
    for entry in fs::read_dir(&cfg.output_dir).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(!name.to_string_lossy().ends_with(".partial"), "{name:?}");
    }
}

#[test]
fn corrupted_tile_is_outvoted() {
    let dir = tempfile::tempdir().unwrap();
    let truth = setup(dir.path());
    let grid = TileGrid::build([N; 3], [3, 3, 3], scaled_tile_size([N; 3])).unwrap();
    let cov = grid.coverage_map();
    for target in [0, 13, 26] {
        let mut cfg = config(
            dir.path(),
            format!("corrupt:{target}:5:{}", prior(dir.path())),
        );
        cfg.output_dir = dir.path().join(format!("out{target}"));
        pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
        let fused = read_atlas_labels(&cfg);
        let mut low_coverage_errors = 0;
        for (i, (&f, &t)) in fused.data().iter().zip(truth.data()).enumerate() {
            if cov.counts[i] >= 3 {
                assert_eq!(f, t, "tile {target}, voxel {i}");
            } else if f != t {
                low_coverage_errors += 1;
            }
        }
        // corner tiles own voxels nobody else sees, so the damage shows up there
        if target != 13 {
            assert!(low_coverage_errors > 0);
        }
    }
}

#[test]
fn concatenation_on_partition_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let truth = setup(dir.path());
    let mut cfg = config(dir.path(), prior(dir.path()));
    cfg.grid = [2, 2, 2];
    cfg.tile_size = None;
    cfg.fusion = FusionMode::Concatenate;
    let report = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    assert!(report.grid.partition);
    assert_eq!(report.grid.tile_size, [N / 2; 3]);
    assert_eq!(read_atlas_labels(&cfg).data(), truth.data());

    // an overlapping grid cannot be concatenated
    cfg.tile_size = Some([30; 3]);
    let err = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
}

#[test]
fn external_process_backend() {
    let dir = tempfile::tempdir().unwrap();
    let truth = setup(dir.path());
    let grid = TileGrid::build([N; 3], [3, 3, 3], scaled_tile_size([N; 3])).unwrap();
    let answers = dir.path().join("answers");
    fs::create_dir(&answers).unwrap();
    for t in grid.tiles() {
        let seg = truth.extract(t.origin, t.size).unwrap();
        io::write_nifti_labels(&seg, answers.join(format!("seg_{}.nii", t.index))).unwrap();
    }
    // the stub checks its inputs exist, then copies the oracle answer for its tile
    let cmd = format!(
        "sh -c 'test -s \"$3\" && test -s \"$4\" && cp \"$0/seg_$1.nii\" \"$2\"' {} {{tile}} {{output}} {{input}} {{spec}}",
        answers.display()
    );
    let mut cfg = config(dir.path(), format!("exec:{cmd}"));
    cfg.work_dir = Some(dir.path().join("work"));
    let report = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    assert_eq!(read_atlas_labels(&cfg).data(), truth.data());
    assert!(report.segmentation.substituted.is_empty());
}

#[test]
fn failing_tiles_follow_policy() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let mut cfg = config(dir.path(), "exec:false {input} {output}".into());
    let err = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap_err();
    assert_eq!(err.stage, Stage::Segmentation);
    assert_eq!(err.exit_code(), 7);
    assert!(!cfg.output_dir.join("atlas_labels.nii").exists());

    cfg.on_tile_failure = FailurePolicy::Background;
    let report = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    assert_eq!(report.segmentation.substituted, (0..27).collect::<Vec<_>>());
    assert!(read_atlas_labels(&cfg).data().iter().all(|&l| l == 0));
}

#[test]
fn rerun_reuses_cached_tiles() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let cfg = config(dir.path(), format!("corrupt:4:2:{}", prior(dir.path())));
    let first = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    let bytes = fs::read(&first.outputs.atlas_labels).unwrap();
    assert_eq!(first.segmentation.cache_hits, 0);
    let second = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    assert_eq!(second.segmentation.cache_hits, 27);
    assert_eq!(fs::read(&second.outputs.atlas_labels).unwrap(), bytes);

    // a different backend must not hit the same entries
    let other = config(dir.path(), prior(dir.path()));
    let third = pipeline::run(&other, &dir.path().join("scan.nii")).unwrap();
    assert_eq!(third.segmentation.cache_hits, 0);
}

#[test]
fn harmonization_changes_only_intensities() {
    let dir = tempfile::tempdir().unwrap();
    let truth = setup(dir.path());
    let mut cfg = config(dir.path(), prior(dir.path()));
    let plain = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    cfg.harmonization = Some(dir.path().join("model"));
    cfg.output_dir = dir.path().join("out_h");
    let harmonized = pipeline::run(&cfg, &dir.path().join("scan.nii")).unwrap();
    let fit = harmonized.harmonization.unwrap();
    // the scan is the model's only atlas
    assert!((fit.beta1 - 1.0).abs() < 1e-9 && fit.beta0.abs() < 1e-9);
    assert!(plain.harmonization.is_none());
    assert_eq!(
        fs::read(&plain.outputs.atlas_labels).unwrap(),
        fs::read(&harmonized.outputs.atlas_labels).unwrap()
    );
    assert_eq!(read_atlas_labels(&cfg).data(), truth.data());
    assert_eq!(plain.grid, harmonized.grid);
}

#[test]
fn estimated_affine_recovers_shift() {
    let dir = tempfile::tempdir().unwrap();
    let truth = setup(dir.path());
    let (scan, _) = io::read_nifti_intensity(dir.path().join("scan.nii")).unwrap();
    // the same image, its world frame moved by (3, -2, 1) mm
    let moved_geom = VolumeGeometry::new(
        [N; 3],
        [1.0; 3],
        AffineTransform::translation([-21.0, -26.0, -23.0]),
    )
    .unwrap();
    let moved = scan.with_geometry(moved_geom).unwrap();
    io::write_nifti_intensity(&moved, dir.path().join("moved.nii")).unwrap();
    let mut cfg = config(dir.path(), prior(dir.path()));
    cfg.affine = AffineSource::Estimate(dir.path().join("scan.nii"));
    let report = pipeline::run(&cfg, &dir.path().join("moved.nii")).unwrap();
    let expect = AffineTransform::translation([3.0, -2.0, 1.0]);
    assert!(
        report.affine.max_abs_diff(&expect) < 1e-6,
        "{:?}",
        report.affine
    );
    let (native, _) = io::read_nifti_labels(&report.outputs.native_labels, None).unwrap();
    assert_eq!(native.data(), truth.data());
}

#[test]
fn errors_carry_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let cfg = config(dir.path(), prior(dir.path()));
    let err = pipeline::run(&cfg, &dir.path().join("missing.nii")).unwrap_err();
    assert_eq!((err.stage, err.exit_code()), (Stage::Io, 3));

    let mut bad = cfg.clone();
    bad.backend = "nonsense".into();
    assert_eq!(
        pipeline::run(&bad, &dir.path().join("scan.nii"))
            .unwrap_err()
            .stage,
        Stage::Config
    );

    let mut bad = cfg.clone();
    bad.grid = [0, 3, 3];
    assert_eq!(
        pipeline::run(&bad, &dir.path().join("scan.nii"))
            .unwrap_err()
            .stage,
        Stage::Tiling
    );

    let mut bad = cfg.clone();
    bad.affine = AffineSource::File(dir.path().join("none.txt"));
    assert_eq!(
        pipeline::run(&bad, &dir.path().join("scan.nii"))
            .unwrap_err()
            .stage,
        Stage::Registration
    );

    let mut bad = cfg.clone();
    bad.harmonization = Some(dir.path().join("no-model"));
    assert_eq!(
        pipeline::run(&bad, &dir.path().join("scan.nii"))
            .unwrap_err()
            .stage,
        Stage::Harmonization
    );
}

#[test]
fn inverse_round_trip_stays_within_one_voxel_of_boundaries() {
    let native_geom = VolumeGeometry::new(
        [40, 44, 36],
        [1.0; 3],
        AffineTransform::translation([-20.0, -22.0, -18.0]),
    )
    .unwrap();
    let native = phantom_labels(&native_geom);
    let forward = oblique(0.35, -0.5, [1.3, -0.7, 2.1]);
    let in_atlas = resample_labels(&native, &forward, &atlas());
    let back = inverse_transform_labels(&in_atlas, &forward, &native_geom);
    let [nx, ny, nz] = native_geom.dims();
    let mut changed = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let b = back.get(x, y, z);
                if b == native.get(x, y, z) {
                    continue;
                }
                changed += 1;
                // the label must come from a voxel in the 3x3x3 neighbourhood
                let mut found = false;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if px < 0
                                || py < 0
                                || pz < 0
                                || px >= nx as i64
                                || py >= ny as i64
                                || pz >= nz as i64
                            {
                                continue;
                            }
                            found |= native.get(px as usize, py as usize, pz as usize) == b;
                        }
                    }
                }
                assert!(
                    found,
                    "voxel {:?} got label {b} from outside its neighbourhood",
                    [x, y, z]
                );
            }
        }
    }
    assert!(changed > 0, "rotation should disturb some boundary voxels");
    assert!(changed < native.data().len() / 10);
}
