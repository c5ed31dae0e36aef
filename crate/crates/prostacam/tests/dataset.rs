use std::fs;
use std::path::{Path, PathBuf};

use prostacam::config::RunConfig;
use prostacam::dataset::{load_patient, scan_dataset, validate_record, Element, Violation};
use prostacam::stages::Pipeline;
use prostacam::volume_io::write_volume;
use prostacam::PipelineError;
use prostacam_core::{Geometry, Grid3, ModalityKind};

fn synth_cohort(out: &Path, n: usize) -> PathBuf {
    let mut cfg = RunConfig {
        output_dir: out.to_path_buf(),
        seed: 3,
        ..Default::default()
    };
    cfg.synth.n_patients = n;
    cfg.synth.grid = [6, 32, 32];
    Pipeline::new(cfg, 1).synth().unwrap()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, to.join(p.file_name().unwrap())).unwrap();
    }
}

#[test]
fn synthetic_cohort_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = synth_cohort(tmp.path(), 10);
    let cat = scan_dataset(&root, None).unwrap();
    assert_eq!(cat.len(), 10);
    assert_eq!((cat.n_positive, cat.n_negative), (5, 5));
    assert!(cat.excluded.is_empty());
    let ids: Vec<&str> = cat.records.iter().map(|r| r.patient_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(ids, sorted);
    for r in &cat.records {
        let kinds: Vec<ModalityKind> = r.volume_paths().keys().copied().collect();
        assert_eq!(kinds, [ModalityKind::T2w, ModalityKind::Adc, ModalityKind::DWI_B800]);
        assert_eq!(r.lesion_mask.is_some(), r.label() == 1);
        let v = load_patient(r).unwrap();
        assert_eq!(v.dwi.modality, ModalityKind::DWI_B800);
    }
    assert_eq!(scan_dataset(&root, None).unwrap(), cat);
}

#[test]
fn single_patient_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let root = synth_cohort(&tmp.path().join("run"), 2);
    let one = tmp.path().join("one");
    copy_dir(&root.join("synth_001"), &one.join("synth_001"));
    fs::write(one.join("labels.csv"), "patient_id,label\nsynth_001,1\n").unwrap();
    let cat = scan_dataset(&one, None).unwrap();
    assert_eq!(cat.len(), 1);
    assert_eq!(cat.records[0].patient_id, "synth_001");
}

#[test]
fn empty_and_missing_roots() {
    let tmp = tempfile::tempdir().unwrap();
    let err = scan_dataset(tmp.path(), None).unwrap_err();
    assert!(matches!(err, PipelineError::EmptyDataset(_)), "{}", err);
    assert_eq!(err.category(), "empty-dataset");
    let err = scan_dataset(&tmp.path().join("absent"), None).unwrap_err();
    assert_eq!(err.category(), "io");
}

#[test]
fn broken_records_are_excluded_with_reasons() {
    let tmp = tempfile::tempdir().unwrap();
    let root = synth_cohort(tmp.path(), 4);
    fs::remove_file(root.join("synth_000/adc.nii.gz")).unwrap();
    let mask = root.join("synth_001/prostate_mask.nii.gz");
    let geometry = Geometry::new([3.0, 0.5, 0.5], [0.0; 3], prostacam_core::volume::IDENTITY_DIRECTION).unwrap();
    write_volume(&mask, &Grid3::filled([6, 32, 32], 0u8), &geometry).unwrap();
    fs::write(root.join("synth_002/t2w.nii.gz"), b"not a volume").unwrap();

    let cat = scan_dataset(&root, None).unwrap();
    assert_eq!(cat.len(), 1);
    assert_eq!(cat.records[0].patient_id, "synth_003");
    let reasons: Vec<(String, String)> = cat
        .excluded
        .iter()
        .map(|e| (e.patient_id.clone(), e.violations.join("; ")))
        .collect();
    assert_eq!(reasons[0].0, "synth_000");
    assert!(reasons[0].1.contains("missing ADC"), "{:?}", reasons);
    assert_eq!(reasons[1].0, "synth_001");
    assert!(reasons[1].1.contains("empty prostate mask"), "{:?}", reasons);
    assert_eq!(reasons[2].0, "synth_002");
    assert!(reasons[2].1.contains("unreadable T2W"), "{:?}", reasons);

    let mut rec = cat.records[0].clone();
    rec.adc = None;
    rec.label = Some(3);
    let v = validate_record(&rec);
    assert!(v.contains(&Violation::Missing(Element::Adc)));
    assert!(v.iter().any(|x| x.element() == Element::Label));
}

#[test]
fn falls_back_to_highest_b_value() {
    let tmp = tempfile::tempdir().unwrap();
    let root = synth_cohort(tmp.path(), 2);
    fs::remove_file(root.join("synth_000/dwi_b800.nii.gz")).unwrap();
    let cat = scan_dataset(&root, None).unwrap();
    let r = cat.get("synth_000").unwrap();
    assert_eq!(r.dwi.as_ref().unwrap().b_value, 50);
    assert!(cat.warnings.iter().any(|w| w.contains("synth_000") && w.contains("b=50")));
    assert_eq!(cat.get("synth_001").unwrap().dwi.as_ref().unwrap().b_value, 800);
}

#[test]
fn manifest_paths_and_duplicates() {
    let tmp = tempfile::tempdir().unwrap();
    let root = synth_cohort(tmp.path(), 2);
    let elsewhere = tmp.path().join("scans");
    copy_dir(&root.join("synth_000"), &elsewhere.join("a"));
    let manifest = tmp.path().join("cohort.csv");
    fs::write(
        &manifest,
        "patient_id,label,t2w,adc,dwi,prostate_mask\n\
         p1,0,a/t2w.nii.gz,a/adc.nii.gz,a/dwi_b800.nii.gz,a/prostate_mask.nii.gz\n",
    )
    .unwrap();
    let cat = scan_dataset(&elsewhere, Some(&manifest)).unwrap();
    assert_eq!(cat.len(), 1);
    assert_eq!(cat.records[0].patient_id, "p1");
    assert_eq!(cat.records[0].dwi.as_ref().unwrap().b_value, 800);

    fs::write(
        &manifest,
        "patient_id,label\nsynth_000,0\nsynth_001,1\nsynth_000,1\n",
    )
    .unwrap();
    let err = scan_dataset(&root, Some(&manifest)).unwrap_err();
    assert!(matches!(&err, PipelineError::DuplicateId(id) if id == "synth_000"), "{}", err);
    assert_eq!(err.category(), "validation");
}
