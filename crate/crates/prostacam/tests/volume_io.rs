use std::path::{Path, PathBuf};

use prostacam::core::{Geometry, Grid3, MaskRole, ModalityKind};
use prostacam::volume_io::{load_mask, load_volume, read_volume, write_volume};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

struct Expected {
    dims: [usize; 3],
    values: Vec<f32>,
    i16_values: Vec<f32>,
    geometry: Geometry,
    mask_count: usize,
}

fn expected() -> Expected {
    let text = std::fs::read_to_string(fixture("oblique.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let arr3 = |k: &str| -> [f64; 3] {
        let a = v[k].as_array().unwrap();
        [a[0].as_f64().unwrap(), a[1].as_f64().unwrap(), a[2].as_f64().unwrap()]
    };
    let rows = v["direction_rows"].as_array().unwrap();
    let mut direction = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            direction[r][c] = rows[r][c].as_f64().unwrap();
        }
    }
    let floats = |k: &str| v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap() as f32).collect();
    let d = arr3("dims_zyx");
    Expected {
        dims: [d[0] as usize, d[1] as usize, d[2] as usize],
        values: floats("values"),
        i16_values: floats("i16_values"),
        geometry: Geometry {
            spacing: arr3("spacing_zyx"),
            origin: arr3("origin"),
            direction,
        },
        mask_count: v["mask_count"].as_u64().unwrap() as usize,
    }
}

#[test]
fn reads_compressed_metaimage_written_by_itk() {
    let e = expected();
    let raw = read_volume(&fixture("oblique.mha")).unwrap();
    assert_eq!(raw.values.dims(), e.dims);
    assert_eq!(raw.values.as_slice(), e.values.as_slice());
    assert!(raw.geometry.approx_eq(&e.geometry, 1e-12), "{:?}", raw.geometry);
}

#[test]
fn reads_integer_metaimage() {
    let e = expected();
    let raw = read_volume(&fixture("oblique_i16.mha")).unwrap();
    assert_eq!(raw.values.as_slice(), e.i16_values.as_slice());
}

#[test]
fn reads_nifti_written_by_itk_in_lps() {
    let e = expected();
    let vol = load_volume(&fixture("oblique.nii.gz"), ModalityKind::T2w).unwrap();
    assert_eq!(vol.voxels.dims(), e.dims);
    assert_eq!(vol.voxels.as_slice(), e.values.as_slice());
    // header fields are float32
    assert!(vol.geometry.approx_eq(&e.geometry, 1e-5), "{:?}", vol.geometry);
}

#[test]
fn mask_labels_become_binary() {
    let e = expected();
    let m = load_mask(&fixture("oblique_mask.nii.gz"), MaskRole::Prostate).unwrap();
    assert_eq!(m.count_nonzero(), e.mask_count);
    assert!(m.voxels.as_slice().iter().all(|&v| v <= 1));
}

#[test]
fn round_trips_both_formats() {
    let e = expected();
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid3::from_vec(e.dims, e.values.clone()).unwrap();
    for name in ["a.nii.gz", "a.nii", "a.mha"] {
        let path = dir.path().join(name);
        write_volume(&path, &grid, &e.geometry).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.values, grid, "{}", name);
        assert!(back.geometry.approx_eq(&e.geometry, 1e-5), "{}", name);
    }
    let mask = grid.map(|v| u8::from(v > 50.0));
    let path = dir.path().join("m.mha");
    write_volume(&path, &mask, &e.geometry).unwrap();
    assert_eq!(read_volume(&path).unwrap().values, mask.map(f32::from));
}

#[test]
fn rejects_text_and_non_finite_input() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("notes.nii.gz");
    std::fs::write(&text, "this is not an image").unwrap();
    assert_eq!(read_volume(&text).unwrap_err().category(), "format");
    let text = dir.path().join("notes.mha");
    std::fs::write(&text, "hello").unwrap();
    assert_eq!(read_volume(&text).unwrap_err().category(), "format");
    assert_eq!(read_volume(&dir.path().join("x.txt")).unwrap_err().category(), "format");
    assert_eq!(read_volume(&dir.path().join("missing.mha")).unwrap_err().category(), "io");

    let e = expected();
    let mut values = e.values.clone();
    values[7] = f32::NAN;
    let path = dir.path().join("nan.nii.gz");
    write_volume(&path, &Grid3::from_vec(e.dims, values).unwrap(), &e.geometry).unwrap();
    let err = load_volume(&path, ModalityKind::Adc).unwrap_err();
    assert!(err.to_string().contains("nan.nii.gz"), "{}", err);
}
