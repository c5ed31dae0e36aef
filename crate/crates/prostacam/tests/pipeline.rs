use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use prostacam::checkpoint::{encode, load_into, save_model, NamedTensor};
use prostacam::config::RunConfig;
use prostacam::stages::Pipeline;
use prostacam::volume_io::read_volume;
use prostacam::PipelineError;
use prostacam_core::nn::{Classifier, Depth, ModelConfig};
use prostacam_core::preprocess::CompositeVolume;

const SMALL: &str = r#"
seed = 1
[preprocess]
in_plane_size = [16, 16]
[model]
architecture = "resnet10"
base_width = 4
stem_pool = false
[train]
epochs = 1
[synth]
n_patients = 4
grid = [8, 32, 32]
"#;

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Relative path → bytes for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_run_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_config(tmp.path()), 2);
    p.synth().unwrap();
    let cat = p.ingest().unwrap();
    assert_eq!(cat.len(), 4);
    let prov = p.preprocess().unwrap();
    assert!(prov.iter().all(|r| (r.slices_per_modality, r.height, r.width) == (12, 16, 16)));
    let (rows, metrics) = p.train().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(metrics.tp + metrics.tn + metrics.fp + metrics.fn_, 4);
    let (mass, summary) = p.explain().unwrap();
    assert_eq!(mass.len(), 4);
    for c in &summary.categories {
        let Some(map) = &c.map else {
            assert_eq!(c.n_contributors, 0);
            continue;
        };
        let v = read_volume(&tmp.path().join(map)).unwrap();
        assert_eq!(v.values.dims(), [36, 16, 16]);
        assert!(v.values.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
    }
    let report = p.report().unwrap();
    let md = fs::read_to_string(&report).unwrap();
    assert!(md.contains("| Acc | Sen | Spec | F1 |"));
    let csv = fs::read_to_string(tmp.path().join("report/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "Acc,Sen,Spec,F1");
    let panels = fs::read_dir(tmp.path().join("report/panels")).unwrap().count();
    assert_eq!(panels, 4);

    let before = tree(&tmp.path().join("report"));
    p.report().unwrap();
    assert_eq!(tree(&tmp.path().join("report")), before);
}

#[test]
fn stages_refuse_stale_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let p = Pipeline::new(cfg.clone(), 1);
    let err = p.explain().unwrap_err();
    assert!(matches!(err, PipelineError::MissingStage("train")), "{}", err);
    assert_eq!(err.category(), "stale");

    p.synth().unwrap();
    p.ingest().unwrap();
    p.preprocess().unwrap();
    let mut changed = cfg;
    changed.preprocess.margin_frac = 0.2;
    let err = Pipeline::new(changed, 1).train().unwrap_err();
    assert!(matches!(err, PipelineError::ConfigChanged { .. }), "{}", err);
    assert_eq!(err.category(), "stale");
}

#[test]
fn synth_and_train_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    // same output path both times: catalogs and the manifest record it
    let out = tmp.path().join("run");
    let run = |jobs: usize| {
        let _ = fs::remove_dir_all(&out);
        let p = Pipeline::new(small_config(&out), jobs);
        p.synth().unwrap();
        p.ingest().unwrap();
        p.preprocess().unwrap();
        p.train().unwrap();
        tree(&out)
    };
    let ta = run(1);
    let tb = run(2);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(tb[k] == *v, "{} differs", k.display());
    }
}

#[test]
fn checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = |seed| ModelConfig {
        depth: Depth::ResNet10,
        base_width: 4,
        stem_pool: false,
        seed,
        ..Default::default()
    };
    let src = Classifier::<f32>::new(cfg(1)).unwrap();
    let path = tmp.path().join("m.ckpt");
    save_model(&path, &src).unwrap();

    let mut dst = Classifier::<f32>::new(cfg(2)).unwrap();
    let rep = load_into(&path, &mut dst, false).unwrap();
    assert!(rep.skipped.is_empty(), "{:?}", rep.skipped);
    assert_eq!(rep.loaded.len(), src.network().params().len());
    assert_eq!(dst.network(), src.network());

    let mut head_free = Classifier::<f32>::new(cfg(3)).unwrap();
    let fresh_head = head_free.clone();
    let rep = load_into(&path, &mut head_free, true).unwrap();
    assert_eq!(rep.skipped, ["fc.weight", "fc.bias"]);
    let fc = |m: &Classifier<f32>| {
        let s = m.network().params();
        s.get(s.find("fc.weight").unwrap()).clone()
    };
    assert_eq!(fc(&head_free), fc(&fresh_head));

    // a narrower model shares only the head bias shape
    let mut narrow = Classifier::<f32>::new(ModelConfig {
        base_width: 2,
        ..cfg(1)
    })
    .unwrap();
    let rep = load_into(&path, &mut narrow, false).unwrap();
    assert_eq!(rep.loaded, ["fc.bias"]);

    let foreign = tmp.path().join("foreign.ckpt");
    let t = NamedTensor {
        name: "encoder.weight".into(),
        shape: vec![1],
        data: vec![0.5],
    };
    fs::write(&foreign, encode(&[t])).unwrap();
    let err = load_into(&foreign, &mut dst, false).unwrap_err();
    assert_eq!(err.category(), "checkpoint");

    fs::write(&path, b"PCAMTNSR\x01").unwrap();
    let err = load_into(&path, &mut dst, false).unwrap_err();
    assert_eq!(err.category(), "format");
}

#[test]
fn stored_composites_reload_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_config(tmp.path()), 1);
    p.synth().unwrap();
    p.ingest().unwrap();
    p.preprocess().unwrap();
    let s = p.load_patient("synth_000").unwrap();
    let c: &CompositeVolume = &s.composite;
    assert_eq!(c.shape(), [1, 36, 16, 16]);
    assert_eq!(c.provenance.patient_id, "synth_000");
}

#[test]
fn command_line_reports_categories() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_prostacam");
    let out = Command::new(bin)
        .args(["--out", tmp.path().to_str().unwrap(), "explain"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[stale]: run stage `train` first"), "{}", err);

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nbase_widht = 3\n").unwrap();
    let out = Command::new(bin)
        .args(["--config", cfg.to_str().unwrap(), "ingest"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]"));

    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = tmp.path().join("run");
    let out = Command::new(bin)
        .args(["--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--seed", "4"])
        .args(["synth", "--n-patients", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let labels = fs::read_to_string(run.join("dataset/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 4);
}
