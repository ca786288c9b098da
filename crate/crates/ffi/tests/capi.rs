use std::ffi::{CStr, CString};
use std::ptr;

use slant_ffi::*;

fn last_error() -> String {
    let p = slant_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn volume_round_trip_through_nifti() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("v.nii"));
    let dims = [4usize, 3, 2];
    let affine = [
        2.0, 0.0, 0.0, -4.0, //
        0.0, 1.5, 0.0, 3.0, //
        0.0, 0.0, 1.0, 0.5, //
        0.0, 0.0, 0.0, 1.0,
    ];
    let data: Vec<u16> = (0..24).map(|i| (i % 5) as u16).collect();
    unsafe {
        let mut vol = ptr::null_mut();
        let st = slant_labels_new(
            dims.as_ptr(),
            affine.as_ptr(),
            data.as_ptr(),
            data.len(),
            5,
            &mut vol,
        );
        assert_eq!(st, SlantStatus::Ok);
        assert_eq!(
            slant_labels_write_nifti(vol, path.as_ptr()),
            SlantStatus::Ok
        );

        let mut back = ptr::null_mut();
        assert_eq!(
            slant_labels_read_nifti(path.as_ptr(), 0, &mut back),
            SlantStatus::Ok
        );
        let mut d = [0usize; 3];
        assert_eq!(slant_labels_dims(back, d.as_mut_ptr()), SlantStatus::Ok);
        assert_eq!(d, dims);
        assert_eq!(slant_labels_num_labels(back), 5);
        let mut len = 0;
        let p = slant_labels_data(back, &mut len);
        assert_eq!(std::slice::from_raw_parts(p, len), data.as_slice());
        let mut a = [0.0; 16];
        assert_eq!(slant_labels_affine(back, a.as_mut_ptr()), SlantStatus::Ok);
        for (x, y) in a.iter().zip(&affine) {
            assert!((x - y).abs() < 1e-6);
        }

        let mut dsc = 0.0;
        assert_eq!(slant_dice(vol, back, 1, &mut dsc), SlantStatus::Ok);
        assert_eq!(dsc, 1.0);
        assert_eq!(slant_dice(vol, back, 4, &mut dsc), SlantStatus::Ok);
        assert_eq!(dsc, 1.0);
        let (mut mean, mut median, mut n) = (0.0, 0.0, 0);
        assert_eq!(
            slant_dice_summary(vol, back, &mut mean, &mut median, &mut n),
            SlantStatus::Ok
        );
        assert_eq!((mean, median, n), (1.0, 1.0, 4));

        slant_labels_free(vol);
        slant_labels_free(back);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut vol = ptr::null_mut();
        let missing = CString::new("/nonexistent/x.nii").unwrap();
        assert_eq!(
            slant_intensity_read_nifti(missing.as_ptr(), &mut vol),
            SlantStatus::Io
        );
        assert!(last_error().contains("/nonexistent/x.nii"));
        assert!(vol.is_null());

        assert_eq!(
            slant_intensity_read_nifti(ptr::null(), &mut vol),
            SlantStatus::NullPointer
        );

        let dims = [2usize, 2, 2];
        let data = [0.0f64; 7];
        let st = slant_intensity_new(
            dims.as_ptr(),
            ptr::null(),
            data.as_ptr(),
            data.len(),
            &mut vol,
        );
        assert_eq!(st, SlantStatus::InvalidArgument);
        assert!(last_error().contains('8'));

        let labels = [0u16, 1, 2, 9, 0, 0, 0, 0];
        let mut lv = ptr::null_mut();
        let st = slant_labels_new(dims.as_ptr(), ptr::null(), labels.as_ptr(), 8, 3, &mut lv);
        assert_eq!(st, SlantStatus::InvalidArgument);

        let mut grid = ptr::null_mut();
        let bad = [0usize, 3, 3];
        let st = slant_grid_build(
            [10usize; 3].as_ptr(),
            bad.as_ptr(),
            [5usize; 3].as_ptr(),
            &mut grid,
        );
        assert_eq!(st, SlantStatus::Tiling);

        let singular = [0.0f64; 16];
        let st = slant_intensity_new(
            dims.as_ptr(),
            singular.as_ptr(),
            [0.0; 8].as_ptr(),
            8,
            &mut vol,
        );
        assert_eq!(st, SlantStatus::InvalidArgument);

        assert_eq!(slant_grid_len(ptr::null()), 0);
        assert!(slant_labels_data(ptr::null(), ptr::null_mut()).is_null());
        slant_labels_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(slant_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn grid_layout_and_coverage() {
    unsafe {
        let mut grid = ptr::null_mut();
        assert_eq!(slant_grid_slant27(&mut grid), SlantStatus::Ok);
        assert_eq!(slant_grid_len(grid), 27);
        let (mut origin, mut size) = ([0usize; 3], [0usize; 3]);
        assert_eq!(
            slant_grid_tile(grid, 26, origin.as_mut_ptr(), size.as_mut_ptr()),
            SlantStatus::Ok
        );
        assert_eq!(origin, [76, 92, 68]);
        assert_eq!(size, [96, 128, 88]);
        assert_eq!(
            slant_grid_tile(grid, 27, origin.as_mut_ptr(), size.as_mut_ptr()),
            SlantStatus::InvalidArgument
        );
        let n = 172 * 220 * 156;
        let mut counts = vec![0u32; n];
        assert_eq!(
            slant_grid_coverage(grid, counts.as_mut_ptr(), n),
            SlantStatus::Ok
        );
        assert_eq!(counts[86 + 172 * (110 + 220 * 78)], 27);
        assert_eq!(counts[0], 1);
        assert_eq!(
            slant_grid_coverage(grid, counts.as_mut_ptr(), n - 1),
            SlantStatus::InvalidArgument
        );
        slant_grid_free(grid);
    }
}

#[test]
fn tile_then_fuse_recovers_the_volume() {
    let dims = [10usize, 9, 8];
    let n: usize = dims.iter().product();
    let labels: Vec<u16> = (0..n).map(|i| ((i / 7) % 4) as u16).collect();
    let intens: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    unsafe {
        let mut grid = ptr::null_mut();
        let st = slant_grid_build(
            dims.as_ptr(),
            [3usize, 2, 2].as_ptr(),
            [5usize, 5, 5].as_ptr(),
            &mut grid,
        );
        assert_eq!(st, SlantStatus::Ok, "{}", last_error());
        let mut vol = ptr::null_mut();
        assert_eq!(
            slant_intensity_new(dims.as_ptr(), ptr::null(), intens.as_ptr(), n, &mut vol),
            SlantStatus::Ok
        );

        // a "segmenter" that rounds the intensities of each tile
        let mut segs = Vec::new();
        for t in 0..slant_grid_len(grid) {
            let mut tile = ptr::null_mut();
            assert_eq!(slant_extract_tile(vol, grid, t, &mut tile), SlantStatus::Ok);
            let mut d = [0usize; 3];
            slant_intensity_dims(tile, d.as_mut_ptr());
            let mut len = 0;
            let data = std::slice::from_raw_parts(slant_intensity_data(tile, &mut len), len);
            let seg_data: Vec<u16> = data.iter().map(|v| *v as u16).collect();
            let mut affine = [0.0; 16];
            slant_intensity_affine(tile, affine.as_mut_ptr());
            let mut seg = ptr::null_mut();
            let st = slant_labels_new(
                d.as_ptr(),
                affine.as_ptr(),
                seg_data.as_ptr(),
                len,
                4,
                &mut seg,
            );
            assert_eq!(st, SlantStatus::Ok);
            segs.push(seg as *const SlantLabelVolume);
            slant_intensity_free(tile);
        }
        let mut fused = ptr::null_mut();
        let mut ties = 99;
        let st = slant_fuse_majority(segs.as_ptr(), segs.len(), grid, vol, &mut fused, &mut ties);
        assert_eq!(st, SlantStatus::Ok, "{}", last_error());
        assert_eq!(ties, 0);
        let mut len = 0;
        assert_eq!(
            std::slice::from_raw_parts(slant_labels_data(fused, &mut len), len),
            labels.as_slice()
        );

        let mut concat = ptr::null_mut();
        let st = slant_fuse_concatenate(segs.as_ptr(), segs.len(), grid, vol, &mut concat);
        assert_eq!(st, SlantStatus::Fusion);

        // resampling the fused labels onto themselves is the identity
        let identity = [
            1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        let mut same = ptr::null_mut();
        assert_eq!(
            slant_resample_labels(fused, identity.as_ptr(), fused, &mut same),
            SlantStatus::Ok
        );
        assert_eq!(
            std::slice::from_raw_parts(slant_labels_data(same, &mut len), len),
            labels.as_slice()
        );
        let mut same_i = ptr::null_mut();
        assert_eq!(
            slant_resample_intensity(vol, identity.as_ptr(), vol, &mut same_i),
            SlantStatus::Ok
        );
        assert_eq!(
            std::slice::from_raw_parts(slant_intensity_data(same_i, &mut len), len),
            intens.as_slice()
        );

        for s in segs {
            slant_labels_free(s as *mut _);
        }
        slant_labels_free(fused);
        slant_labels_free(same);
        slant_intensity_free(same_i);
        slant_intensity_free(vol);
        slant_grid_free(grid);
    }
}

#[test]
fn harmonization_model_from_disk() {
    use slant_core::geometry::{Volume, VolumeGeometry};
    use slant_core::harmonize::HarmonizationModel;

    let dir = tempfile::tempdir().unwrap();
    let geom = VolumeGeometry::diagonal([6, 5, 4], [1.0; 3]).unwrap();
    let atlas = Volume::from_fn(geom.clone(), |[x, y, z]| {
        (x * 7 + y * 3 + z * 11) as f64 % 13.0
    })
    .unwrap();
    let mask = Volume::filled(geom, true);
    HarmonizationModel::fit(std::slice::from_ref(&atlas), &[mask], 32)
        .unwrap()
        .save(dir.path().join("model"))
        .unwrap();
    let model_dir = cpath(&dir.path().join("model"));
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            slant_harmonization_load(model_dir.as_ptr(), &mut model),
            SlantStatus::Ok
        );
        let scaled: Vec<f64> = atlas.data().iter().map(|v| 3.0 * v - 20.0).collect();
        let mut vol = ptr::null_mut();
        let st = slant_intensity_new(
            [6usize, 5, 4].as_ptr(),
            ptr::null(),
            scaled.as_ptr(),
            scaled.len(),
            &mut vol,
        );
        assert_eq!(st, SlantStatus::Ok);
        let (mut out, mut b1, mut b0) = (ptr::null_mut(), 0.0, 0.0);
        assert_eq!(
            slant_harmonize(model, vol, &mut out, &mut b1, &mut b0),
            SlantStatus::Ok
        );
        assert!((b1 - 1.0).abs() < 1e-9 && b0.abs() < 1e-9, "{b1} {b0}");

        let wrong = [1.0; 8];
        let mut small = ptr::null_mut();
        slant_intensity_new(
            [2usize, 2, 2].as_ptr(),
            ptr::null(),
            wrong.as_ptr(),
            8,
            &mut small,
        );
        let mut none = ptr::null_mut();
        let st = slant_harmonize(model, small, &mut none, ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, SlantStatus::Geometry);

        slant_intensity_free(small);
        slant_intensity_free(out);
        slant_intensity_free(vol);
        slant_harmonization_free(model);
    }
}
