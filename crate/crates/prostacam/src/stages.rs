//! The six pipeline stages over one output directory.
//!
//! ```text
//! <out>/run_manifest.json
//! <out>/dataset/                      synth (unless dataset_root is set)
//! <out>/ingest/catalog.json
//! <out>/preprocess/<id>/composite.nii.gz, prostate_mask.nii.gz,
//!                       lesion_mask.nii.gz, provenance.json
//! <out>/train/fold_results.csv, losses.csv, metrics.json, folds/<id>.ckpt
//! <out>/explain/maps/<id>_class<k>.nii.gz, summed/<CAT>.nii.gz,
//!               attention_mass.csv, summary.json
//! <out>/report/summary.md, metrics.csv, panels/<id>_<CAT>_<slice>.png
//! ```
//!
//! Every stage checks the run manifest for its upstream stage and records
//! its own config hash, seeds, checksums and warnings there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use prostacam_core::gradcam::{attention_mass_in_mask, gradcam_pp, sum_attention_maps, ClassPolicy};
use prostacam_core::metrics::{aggregate_metrics, categorize_outcome, confusion_matrix, ConfusionMatrix, MetricsReport, OutcomeCategory};
use prostacam_core::nn::Classifier;
use prostacam_core::preprocess::{preprocess_patient, CompositeVolume, CropBox, Provenance, SliceWindow};
use prostacam_core::render::{patient_panel, select_slice, RgbImage};
use prostacam_core::synth::{cohort_labels, generate_patient};
use prostacam_core::train::{fit, make_loocv_folds, train_fold};
use prostacam_core::{Geometry, Grid3};

use crate::checkpoint::{self, NamedTensor};
use crate::config::{Layout, ModelPolicy, RunConfig};
use crate::dataset::{load_patient, scan_dataset, DatasetCatalog, DEFAULT_MANIFEST};
use crate::error::{PipelineError, Result};
use crate::manifest::{file_sha256, RunManifest, Stage, StageRecord};
use crate::volume_io::{read_volume, write_volume};

/// A configured run: config, output directory and worker count.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub jobs: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(PipelineError::MissingStage(stage)),
        Err(e) => return Err(PipelineError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| PipelineError::format(path, e.to_string()))
}

fn read_csv_rows(path: &Path, stage: &'static str) -> Result<Vec<BTreeMap<String, String>>> {
    if !path.exists() {
        return Err(PipelineError::MissingStage(stage));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| PipelineError::format(path, e.to_string()))?.clone();
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| PipelineError::format(path, e.to_string()))?;
            Ok(headers.iter().map(str::to_string).zip(r.iter().map(str::to_string)).collect())
        })
        .collect()
}

fn field<'a>(row: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    row.get(key)
        .map(String::as_str)
        .ok_or_else(|| PipelineError::format(path, format!("missing column {}", key)))
}

fn parse<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.parse().map_err(|_| PipelineError::format(path, format!("cannot parse `{}`", s)))
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| PipelineError::Config(format!("PNG encoding failed: {}", e));
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(&img.to_rgb8()).map_err(err)?;
    w.finish().map_err(err)?;
    Ok(out)
}

/// Geometry as stored in provenance files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
}

impl From<&Geometry> for GeometryRecord {
    fn from(g: &Geometry) -> Self {
        Self {
            spacing: g.spacing,
            origin: g.origin,
            direction: g.direction,
        }
    }
}

impl GeometryRecord {
    pub fn geometry(&self) -> Geometry {
        Geometry {
            spacing: self.spacing,
            origin: self.origin,
            direction: self.direction,
        }
    }
}

/// Sidecar of every composite: how it was made and how to read it back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub patient_id: String,
    pub label: u8,
    pub layout: Layout,
    pub slices_per_modality: usize,
    pub height: usize,
    pub width: usize,
    pub dwi_b_value: u32,
    pub target_slices: usize,
    pub margin_frac: f64,
    pub in_plane_size: Option<[usize; 2]>,
    pub mask_outside_prostate: bool,
    /// `[src_start, count, dst_start, target]`.
    pub slice_window: [usize; 4],
    /// Inclusive `[y0, y1, x0, x1]` on the T2w grid.
    pub crop_box: [usize; 4],
    /// Per-modality grid (`slices_per_modality × height × width`).
    pub geometry: GeometryRecord,
    pub has_lesion_mask: bool,
}

impl ProvenanceRecord {
    fn provenance(&self, cfg: &RunConfig) -> Provenance {
        let mut params = cfg.preprocess.params();
        params.target_slices = self.target_slices;
        params.margin_frac = self.margin_frac;
        params.in_plane_size = self.in_plane_size;
        params.mask_outside_prostate = self.mask_outside_prostate;
        params.layout = match self.layout {
            Layout::Interleaved => prostacam_core::preprocess::LayoutMode::Interleaved,
            Layout::Channels => prostacam_core::preprocess::LayoutMode::Channels,
        };
        let [src_start, count, dst_start, target] = self.slice_window;
        let [y0, y1, x0, x1] = self.crop_box;
        Provenance {
            patient_id: self.patient_id.clone(),
            params,
            dwi_b_value: self.dwi_b_value,
            slice_window: SliceWindow {
                src_start,
                count,
                dst_start,
                target,
            },
            crop_box: CropBox { y0, y1, x0, x1 },
        }
    }
}

/// One preprocessed patient read back from disk.
#[derive(Debug, Clone)]
pub struct StoredPatient {
    pub record: ProvenanceRecord,
    pub composite: CompositeVolume,
    pub prostate: Grid3<u8>,
    pub lesion: Option<Grid3<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRow {
    pub val_id: String,
    pub label: u8,
    pub predicted_class: u8,
    pub probability_positive: f64,
    pub final_train_loss: f64,
}

impl FoldRow {
    pub fn category(&self) -> OutcomeCategory {
        categorize_outcome(self.predicted_class, self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

impl MetricsFile {
    fn new(cm: &ConfusionMatrix, m: &MetricsReport) -> Self {
        Self {
            tp: cm.tp,
            tn: cm.tn,
            fp: cm.fp,
            fn_: cm.fn_,
            accuracy: m.accuracy,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            f1: m.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassRow {
    pub patient_id: String,
    pub label: u8,
    pub predicted_class: u8,
    pub category: OutcomeCategory,
    pub class_index: u8,
    /// `None` without a lesion mask.
    pub lesion_mass: Option<f64>,
    pub lesion_fraction: Option<f64>,
    pub prostate_mass: f64,
    pub prostate_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: String,
    pub n_contributors: usize,
    pub map: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub layer: String,
    pub categories: Vec<CategorySummary>,
    /// Mean lesion attention mass over TP patients with a lesion mask.
    pub tp_mean_lesion_mass: Option<f64>,
    /// Mean lesion volume fraction over the same patients.
    pub tp_mean_lesion_fraction: Option<f64>,
}

fn category_tag(c: OutcomeCategory) -> &'static str {
    c.as_str()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Pipeline {
    pub fn new(config: RunConfig, jobs: usize) -> Self {
        Self {
            config,
            jobs: jobs.max(1),
        }
    }

    pub fn out(&self) -> &Path {
        &self.config.output_dir
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| PipelineError::Config(format!("cannot start {} workers: {}", self.jobs, e)))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(self.out())
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn checksums(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((self.rel(p), file_sha256(p)?)))
            .collect()
    }

    fn begin(&self, stage: Stage) -> Result<RunManifest> {
        let m = RunManifest::load(self.out())?;
        m.require_upstream(&self.config, stage)?;
        Ok(m)
    }

    fn finish(&self, mut manifest: RunManifest, stage: Stage, seeds: &[(&str, u64)], files: &[PathBuf], warnings: Vec<String>) -> Result<()> {
        manifest.record(
            stage,
            StageRecord {
                config_hash: crate::manifest::stage_hash(&self.config, stage),
                seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                checksums: self.checksums(files)?,
                warnings,
            },
        );
        manifest.save(self.out())
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        self.out().join(stage.name())
    }

    // ------------------------------------------------------------- synth

    /// Writes a synthetic cohort in the default dataset layout and returns
    /// the dataset root.
    pub fn synth(&self) -> Result<PathBuf> {
        let manifest = self.begin(Stage::Synth)?;
        let spec = self.config.synthetic_spec();
        spec.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let root = self.config.dataset_root();
        let cohort = self.pool()?.install(|| -> Result<_> {
            cohort_labels(&spec)?
                .par_iter()
                .enumerate()
                .map(|(i, &l)| Ok(generate_patient(&spec, i, l == 1)?))
                .collect::<Result<Vec<_>>>()
        })?;
        let mut files = Vec::new();
        let mut labels = String::from("patient_id,label\n");
        for p in &cohort {
            let dir = root.join(&p.patient_id);
            let mut put_vol = |name: &str, v: &prostacam_core::ModalityVolume| -> Result<()> {
                let path = dir.join(name);
                write_volume(&path, &v.voxels, &v.geometry)?;
                files.push(path);
                Ok(())
            };
            put_vol("t2w.nii.gz", &p.t2w)?;
            put_vol("adc.nii.gz", &p.adc)?;
            put_vol(&format!("dwi_b{}.nii.gz", p.dwi.modality.b_value().unwrap_or(0)), &p.dwi)?;
            put_vol(&format!("dwi_b{}.nii.gz", p.dwi_low_b.modality.b_value().unwrap_or(0)), &p.dwi_low_b)?;
            let path = dir.join("prostate_mask.nii.gz");
            write_volume(&path, &p.prostate.voxels, &p.prostate.geometry)?;
            files.push(path);
            if let Some(l) = &p.lesion {
                let inside = l
                    .voxels
                    .as_slice()
                    .iter()
                    .zip(p.prostate.voxels.as_slice())
                    .all(|(&a, &b)| a == 0 || b == 1);
                assert!(inside, "{}: lesion mask leaves the prostate", p.patient_id);
                let path = dir.join("lesion_mask.nii.gz");
                write_volume(&path, &l.voxels, &l.geometry)?;
                files.push(path);
            }
            let _ = writeln!(labels, "{},{}", p.patient_id, p.label);
        }
        let path = root.join(DEFAULT_MANIFEST);
        write_file(&path, labels.as_bytes())?;
        files.push(path);
        self.finish(manifest, Stage::Synth, &[("synth", spec.seed)], &files, Vec::new())?;
        Ok(root)
    }

    // ------------------------------------------------------------ ingest

    pub fn ingest(&self) -> Result<DatasetCatalog> {
        let manifest = self.begin(Stage::Ingest)?;
        let root = self.config.dataset_root();
        let catalog = self
            .pool()?
            .install(|| scan_dataset(&root, self.config.manifest.as_deref()))?;
        let path = self.dir(Stage::Ingest).join("catalog.json");
        write_json(&path, &catalog)?;
        // data checksums of every input the catalog points at
        let mut files = vec![path];
        for r in &catalog.records {
            files.extend(r.volume_paths().values().map(|p| p.to_path_buf()));
            files.extend(r.prostate_mask.iter().cloned());
            files.extend(r.lesion_mask.iter().cloned());
        }
        self.finish(manifest, Stage::Ingest, &[], &files, catalog.warnings.clone())?;
        Ok(catalog)
    }

    pub fn load_catalog(&self) -> Result<DatasetCatalog> {
        read_json(&self.dir(Stage::Ingest).join("catalog.json"), "ingest")
    }

    // -------------------------------------------------------- preprocess

    fn patient_dir(&self, id: &str) -> PathBuf {
        self.dir(Stage::Preprocess).join(id)
    }

    pub fn preprocess(&self) -> Result<Vec<ProvenanceRecord>> {
        let manifest = self.begin(Stage::Preprocess)?;
        let catalog = self.load_catalog()?;
        let params = self.config.preprocess.params();
        let layout = self.config.preprocess.layout;
        let outputs = self.pool()?.install(|| {
            catalog
                .records
                .par_iter()
                .map(|rec| -> Result<(ProvenanceRecord, Vec<PathBuf>)> {
                    let vols = load_patient(rec)?;
                    let pp = preprocess_patient(&vols, &params).map_err(|e| match e {
                        prostacam_core::Error::EmptyProstateMask => PipelineError::data(
                            rec.prostate_mask.as_deref().unwrap_or(Path::new(&rec.patient_id)),
                            e,
                        ),
                        other => PipelineError::Core(other),
                    })?;
                    let c = &pp.composite;
                    let [c_n, d_n, h, w] = c.shape();
                    let s = c.slices_per_modality();
                    let w_ = c.provenance.slice_window;
                    let b = c.provenance.crop_box;
                    let record = ProvenanceRecord {
                        patient_id: rec.patient_id.clone(),
                        label: rec.label(),
                        layout,
                        slices_per_modality: s,
                        height: h,
                        width: w,
                        dwi_b_value: c.provenance.dwi_b_value,
                        target_slices: params.target_slices,
                        margin_frac: params.margin_frac,
                        in_plane_size: params.in_plane_size,
                        mask_outside_prostate: params.mask_outside_prostate,
                        slice_window: [w_.src_start, w_.count, w_.dst_start, w_.target],
                        crop_box: [b.y0, b.y1, b.x0, b.x1],
                        geometry: GeometryRecord::from(&pp.geometry),
                        has_lesion_mask: pp.lesion.is_some(),
                    };
                    let dir = self.patient_dir(&rec.patient_id);
                    let mut geom = pp.geometry;
                    geom.spacing[0] /= (c_n * d_n / s) as f64;
                    let stacked = Grid3::from_vec([c_n * d_n, h, w], c.data().to_vec())?;
                    let mut files = vec![dir.join("composite.nii.gz"), dir.join("prostate_mask.nii.gz")];
                    write_volume(&files[0], &stacked, &geom)?;
                    write_volume(&files[1], &pp.prostate, &pp.geometry)?;
                    if let Some(l) = &pp.lesion {
                        let p = dir.join("lesion_mask.nii.gz");
                        write_volume(&p, l, &pp.geometry)?;
                        files.push(p);
                    }
                    let p = dir.join("provenance.json");
                    write_json(&p, &record)?;
                    files.push(p);
                    Ok((record, files))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let files: Vec<PathBuf> = outputs.iter().flat_map(|(_, f)| f.clone()).collect();
        let records = outputs.into_iter().map(|(r, _)| r).collect();
        self.finish(manifest, Stage::Preprocess, &[], &files, Vec::new())?;
        Ok(records)
    }

    pub fn load_patient(&self, id: &str) -> Result<StoredPatient> {
        let dir = self.patient_dir(id);
        let record: ProvenanceRecord = read_json(&dir.join("provenance.json"), "preprocess")?;
        let path = dir.join("composite.nii.gz");
        let stacked = read_volume(&path)?.values;
        let layout = match record.layout {
            Layout::Interleaved => prostacam_core::preprocess::LayoutMode::Interleaved,
            Layout::Channels => prostacam_core::preprocess::LayoutMode::Channels,
        };
        let composite = CompositeVolume::from_parts(
            layout,
            record.slices_per_modality,
            record.height,
            record.width,
            stacked.into_vec(),
            record.provenance(&self.config),
        )
        .map_err(|e| PipelineError::data(&path, e))?;
        let mask = |name: &str| -> Result<Grid3<u8>> {
            let p = dir.join(name);
            Ok(read_volume(&p)?.values.map(|v| u8::from(v != 0.0)))
        };
        let prostate = mask("prostate_mask.nii.gz")?;
        let lesion = record.has_lesion_mask.then(|| mask("lesion_mask.nii.gz")).transpose()?;
        Ok(StoredPatient {
            record,
            composite,
            prostate,
            lesion,
        })
    }

    fn load_all(&self, catalog: &DatasetCatalog) -> Result<Vec<StoredPatient>> {
        catalog
            .records
            .iter()
            .map(|r| self.load_patient(&r.patient_id))
            .collect()
    }

    // ------------------------------------------------------------- train

    fn fold_checkpoint(&self, id: &str) -> PathBuf {
        self.dir(Stage::Train).join("folds").join(format!("{}.ckpt", id))
    }

    fn pretrained(&self) -> Result<Option<Vec<NamedTensor>>> {
        self.config
            .model
            .init_checkpoint
            .as_deref()
            .map(checkpoint::read_checkpoint)
            .transpose()
    }

    pub fn train(&self) -> Result<(Vec<FoldRow>, MetricsFile)> {
        let manifest = self.begin(Stage::Train)?;
        let catalog = self.load_catalog()?;
        let patients = self.load_all(&catalog)?;
        let ids: Vec<&str> = patients.iter().map(|p| p.record.patient_id.as_str()).collect();
        let plan = make_loocv_folds(&ids)?;
        let tcfg = self.config.train_config();
        let mcfg = self.config.model_config();
        let pretrained = self.pretrained()?;
        let reset_head = self.config.model.reset_head;
        let by_id: BTreeMap<&str, &StoredPatient> = patients.iter().map(|p| (p.record.patient_id.as_str(), p)).collect();

        let results = self.pool()?.install(|| {
            plan.folds
                .par_iter()
                .map(|fold| -> Result<(FoldRow, Vec<f64>)> {
                    let train: Vec<(&CompositeVolume, u8)> = fold
                        .train_ids
                        .iter()
                        .map(|id| (&by_id[id].composite, by_id[id].record.label))
                        .collect();
                    let val = by_id[fold.val_id];
                    let load = |m: &mut Classifier<f32>| -> prostacam_core::Result<()> {
                        if let Some(t) = &pretrained {
                            m.load_pretrained(
                                t.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
                                reset_head,
                            )?;
                        }
                        Ok(())
                    };
                    let (model, outcome) = train_fold(&train, &val.composite, &tcfg, &mcfg, Some(&load))?;
                    checkpoint::save_model(&self.fold_checkpoint(fold.val_id), &model)?;
                    Ok((
                        FoldRow {
                            val_id: fold.val_id.to_string(),
                            label: val.record.label,
                            predicted_class: outcome.prediction.predicted_class,
                            probability_positive: outcome.prediction.probability_positive,
                            final_train_loss: outcome.train.final_loss(),
                        },
                        outcome.train.epoch_losses.clone(),
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let dir = self.dir(Stage::Train);
        let mut table = String::from("val_id,label,predicted_class,probability_positive,final_train_loss\n");
        let mut losses = String::from("val_id,epoch,loss\n");
        for (r, l) in &results {
            let _ = writeln!(
                table,
                "{},{},{},{:.6},{:.6}",
                r.val_id, r.label, r.predicted_class, r.probability_positive, r.final_train_loss
            );
            for (e, v) in l.iter().enumerate() {
                let _ = writeln!(losses, "{},{},{:.6}", r.val_id, e + 1, v);
            }
        }
        let rows: Vec<FoldRow> = results.into_iter().map(|(r, _)| r).collect();
        let cm = confusion_matrix(rows.iter().map(|r| (r.predicted_class, r.label)));
        let metrics = MetricsFile::new(&cm, &aggregate_metrics(&cm));
        let mut files = vec![dir.join("fold_results.csv"), dir.join("losses.csv"), dir.join("metrics.json")];
        write_file(&files[0], table.as_bytes())?;
        write_file(&files[1], losses.as_bytes())?;
        write_json(&files[2], &metrics)?;
        files.extend(rows.iter().map(|r| self.fold_checkpoint(&r.val_id)));
        self.finish(
            manifest,
            Stage::Train,
            &[("model", mcfg.seed), ("train", tcfg.seed)],
            &files,
            Vec::new(),
        )?;
        Ok((rows, metrics))
    }

    pub fn load_fold_results(&self) -> Result<Vec<FoldRow>> {
        let path = self.dir(Stage::Train).join("fold_results.csv");
        read_csv_rows(&path, "train")?
            .iter()
            .map(|row| {
                Ok(FoldRow {
                    val_id: field(row, "val_id", &path)?.to_string(),
                    label: parse(field(row, "label", &path)?, &path)?,
                    predicted_class: parse(field(row, "predicted_class", &path)?, &path)?,
                    probability_positive: parse(field(row, "probability_positive", &path)?, &path)?,
                    final_train_loss: parse(field(row, "final_train_loss", &path)?, &path)?,
                })
            })
            .collect()
    }

    // ----------------------------------------------------------- explain

    fn map_path(&self, id: &str, class_index: u8) -> PathBuf {
        self.dir(Stage::Explain)
            .join("maps")
            .join(format!("{}_class{}.nii.gz", id, class_index))
    }

    fn summed_path(&self, c: OutcomeCategory) -> PathBuf {
        self.dir(Stage::Explain)
            .join("summed")
            .join(format!("{}.nii.gz", category_tag(c)))
    }

    /// One model trained on every patient, for the `final` model policy.
    fn final_model(&self, patients: &[StoredPatient]) -> Result<Classifier<f32>> {
        let path = self.dir(Stage::Explain).join("final_model.ckpt");
        let mut model = Classifier::<f32>::new(self.config.model_config())?;
        if let Some(t) = self.pretrained()? {
            model.load_pretrained(
                t.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
                self.config.model.reset_head,
            )?;
        }
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for p in patients {
            let t = model.input_tensor(&p.composite)?;
            let shape = t.shape()[1..].to_vec();
            samples.push(t.reshape(&shape)?);
            labels.push(p.record.label);
        }
        fit(&mut model, &samples, &labels, &self.config.train_config())?;
        checkpoint::save_model(&path, &model)?;
        Ok(model)
    }

    fn model_for(&self, id: &str) -> Result<Classifier<f32>> {
        let mut model = Classifier::<f32>::new(self.config.model_config())?;
        let path = self.fold_checkpoint(id);
        if !path.exists() {
            return Err(PipelineError::MissingStage("train"));
        }
        let report = checkpoint::load_into(&path, &mut model, false)?;
        if !report.skipped.is_empty() {
            return Err(PipelineError::ConfigChanged { stage: "train" });
        }
        Ok(model)
    }

    pub fn explain(&self) -> Result<(Vec<MassRow>, ExplainSummary)> {
        let manifest = self.begin(Stage::Explain)?;
        let catalog = self.load_catalog()?;
        let patients = self.load_all(&catalog)?;
        let folds: BTreeMap<String, FoldRow> = self
            .load_fold_results()?
            .into_iter()
            .map(|r| (r.val_id.clone(), r))
            .collect();
        let policy = self.config.xai.class_policy();
        let maps_dir = self.dir(Stage::Explain).join("maps");
        if maps_dir.exists() {
            fs::remove_dir_all(&maps_dir).map_err(|e| PipelineError::io(&maps_dir, e))?;
        }
        let final_model = match self.config.xai.model_policy {
            ModelPolicy::Fold => None,
            ModelPolicy::Final => Some(self.pool()?.install(|| self.final_model(&patients))?),
        };

        let maps = self.pool()?.install(|| {
            patients
                .par_iter()
                .map(|p| -> Result<(MassRow, Grid3<f32>)> {
                    let id = &p.record.patient_id;
                    let fold = folds.get(id).ok_or(PipelineError::MissingStage("train"))?;
                    let own;
                    let model = match &final_model {
                        Some(m) => m,
                        None => {
                            own = self.model_for(id)?;
                            &own
                        }
                    };
                    let class = match policy {
                        ClassPolicy::Predicted => None,
                        ClassPolicy::Positive => Some(1),
                    };
                    let map = gradcam_pp(model, &p.composite, class)?;
                    write_volume(&self.map_path(id, map.class_index), &map.values, &composite_geometry(p))?;
                    let prostate = p.composite.expand_to_spatial(&p.prostate)?;
                    let fraction = |m: &Grid3<u8>| m.as_slice().iter().filter(|&&v| v != 0).count() as f64 / m.len() as f64;
                    let (lesion_mass, lesion_fraction) = match &p.lesion {
                        Some(l) => {
                            let l = p.composite.expand_to_spatial(l)?;
                            (Some(attention_mass_in_mask(&map.values, &l)?), Some(fraction(&l)))
                        }
                        None => (None, None),
                    };
                    Ok((
                        MassRow {
                            patient_id: id.clone(),
                            label: fold.label,
                            predicted_class: fold.predicted_class,
                            category: fold.category(),
                            class_index: map.class_index,
                            lesion_mass,
                            lesion_fraction,
                            prostate_mass: attention_mass_in_mask(&map.values, &prostate)?,
                            prostate_fraction: fraction(&prostate),
                        },
                        map.values,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let dir = self.dir(Stage::Explain);
        let mut files: Vec<PathBuf> = maps.iter().map(|(r, _)| self.map_path(&r.patient_id, r.class_index)).collect();
        let mut categories = Vec::new();
        for c in OutcomeCategory::ALL {
            let members: Vec<&Grid3<f32>> = maps.iter().filter(|(r, _)| r.category == c).map(|(_, m)| m).collect();
            let mut entry = CategorySummary {
                category: category_tag(c).to_string(),
                n_contributors: members.len(),
                map: None,
            };
            let path = self.summed_path(c);
            if members.is_empty() {
                // a stale map from an earlier run must not survive
                let _ = fs::remove_file(&path);
            } else if members.windows(2).any(|w| w[0].dims() != w[1].dims()) {
                return Err(PipelineError::Core(prostacam_core::Error::Geometry(format!(
                    "{} maps differ in shape; summing needs a fixed in-plane size (preprocess.in_plane_size)",
                    category_tag(c)
                ))));
            } else {
                let summed = sum_attention_maps(&members, c)?;
                let p0 = patients.iter().find(|p| maps.iter().any(|(r, _)| r.category == c && r.patient_id == p.record.patient_id));
                let geom = composite_geometry(p0.expect("category has a member"));
                write_volume(&path, &summed.values, &geom)?;
                entry.map = Some(self.rel(&path));
                files.push(path);
            }
            categories.push(entry);
        }

        let mut table = String::from(
            "patient_id,label,predicted_class,category,class_index,lesion_mass,lesion_fraction,prostate_mass,prostate_fraction\n",
        );
        let opt = |v: Option<f64>| v.map(|v| format!("{:.6}", v)).unwrap_or_default();
        for (r, _) in &maps {
            let _ = writeln!(
                table,
                "{},{},{},{},{},{},{},{:.6},{:.6}",
                r.patient_id,
                r.label,
                r.predicted_class,
                category_tag(r.category),
                r.class_index,
                opt(r.lesion_mass),
                opt(r.lesion_fraction),
                r.prostate_mass,
                r.prostate_fraction
            );
        }
        let tp: Vec<&MassRow> = maps
            .iter()
            .map(|(r, _)| r)
            .filter(|r| r.category == OutcomeCategory::Tp && r.lesion_mass.is_some())
            .collect();
        let summary = ExplainSummary {
            layer: self.config.model_config().feature_layer,
            categories,
            tp_mean_lesion_mass: mean(&tp.iter().filter_map(|r| r.lesion_mass).collect::<Vec<_>>()),
            tp_mean_lesion_fraction: mean(&tp.iter().filter_map(|r| r.lesion_fraction).collect::<Vec<_>>()),
        };
        let table_path = dir.join("attention_mass.csv");
        write_file(&table_path, table.as_bytes())?;
        let summary_path = dir.join("summary.json");
        write_json(&summary_path, &summary)?;
        files.push(table_path);
        files.push(summary_path);
        if final_model.is_some() {
            files.push(dir.join("final_model.ckpt"));
        }
        self.finish(manifest, Stage::Explain, &[], &files, Vec::new())?;
        Ok((maps.into_iter().map(|(r, _)| r).collect(), summary))
    }

    // ------------------------------------------------------------ report

    pub fn report(&self) -> Result<PathBuf> {
        let manifest = self.begin(Stage::Report)?;
        let catalog = self.load_catalog()?;
        let folds = self.load_fold_results()?;
        let metrics: MetricsFile = read_json(&self.dir(Stage::Train).join("metrics.json"), "train")?;
        let summary: ExplainSummary = read_json(&self.dir(Stage::Explain).join("summary.json"), "explain")?;
        let source = self.config.xai.source_modality.index();
        let alpha = self.config.xai.alpha;
        let dir = self.dir(Stage::Report);
        let panel_dir = dir.join("panels");
        // panels from an earlier run may carry other slice numbers
        if panel_dir.exists() {
            fs::remove_dir_all(&panel_dir).map_err(|e| PipelineError::io(&panel_dir, e))?;
        }

        let panels = self.pool()?.install(|| {
            folds
                .par_iter()
                .map(|f| -> Result<PathBuf> {
                    if catalog.get(&f.val_id).is_none() {
                        return Err(PipelineError::ConfigChanged { stage: "train" });
                    }
                    let p = self.load_patient(&f.val_id)?;
                    let class = match self.config.xai.class_policy() {
                        ClassPolicy::Positive => 1,
                        ClassPolicy::Predicted => self.find_map_class(&f.val_id)?,
                    };
                    let map_path = self.map_path(&f.val_id, class);
                    if !map_path.exists() {
                        return Err(PipelineError::MissingStage("explain"));
                    }
                    let map = read_volume(&map_path)?.values;
                    let src = p.composite.modality_volume(source);
                    let att = p.composite.modality_part(&map, source)?;
                    let slice = select_slice(&att);
                    let img = patient_panel(&src, &att, p.lesion.as_ref(), slice, alpha)?;
                    let path = panel_dir.join(format!("{}_{}_{}.png", f.val_id, category_tag(f.category()), slice));
                    write_file(&path, &encode_png(&img)?)?;
                    Ok(path)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut md = String::from("# prostacam report\n\n");
        let _ = writeln!(md, "Leave-one-out evaluation over {} patients.\n", folds.len());
        md.push_str("| Acc | Sen | Spec | F1 |\n|---|---|---|---|\n");
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |\n",
            pct(metrics.accuracy),
            pct(metrics.sensitivity),
            pct(metrics.specificity),
            pct(metrics.f1)
        );
        let _ = writeln!(
            md,
            "Confusion matrix: TP {}, TN {}, FP {}, FN {}.\n",
            metrics.tp, metrics.tn, metrics.fp, metrics.fn_
        );
        let _ = writeln!(md, "## Attention ({})\n", summary.layer);
        md.push_str("| Category | Patients | Summed map |\n|---|---|---|\n");
        for c in &summary.categories {
            let _ = writeln!(
                md,
                "| {} | {} | {} |",
                c.category,
                c.n_contributors,
                c.map.as_deref().unwrap_or("-")
            );
        }
        if let (Some(m), Some(f)) = (summary.tp_mean_lesion_mass, summary.tp_mean_lesion_fraction) {
            let _ = writeln!(
                md,
                "\nMean lesion attention mass over TP patients: {:.4} (lesion volume fraction {:.4}, ratio {:.2}).",
                m,
                f,
                m / f
            );
        }
        md.push_str("\n## Panels\n\n");
        for p in &panels {
            let _ = writeln!(md, "- {}", self.rel(p).trim_start_matches("report/"));
        }
        let mut csv = String::from("Acc,Sen,Spec,F1\n");
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            pct(metrics.accuracy),
            pct(metrics.sensitivity),
            pct(metrics.specificity),
            pct(metrics.f1)
        );
        let md_path = dir.join("summary.md");
        let csv_path = dir.join("metrics.csv");
        write_file(&md_path, md.as_bytes())?;
        write_file(&csv_path, csv.as_bytes())?;
        let mut files = vec![md_path.clone(), csv_path];
        files.extend(panels);
        self.finish(manifest, Stage::Report, &[], &files, Vec::new())?;
        Ok(md_path)
    }

    fn find_map_class(&self, id: &str) -> Result<u8> {
        [0u8, 1]
            .into_iter()
            .find(|&k| self.map_path(id, k).exists())
            .ok_or(PipelineError::MissingStage("explain"))
    }
}

/// Geometry of the stacked composite grid (slice spacing divided among
/// the stacked modality slices).
fn composite_geometry(p: &StoredPatient) -> Geometry {
    let mut g = p.record.geometry.geometry();
    let [d, _, _] = p.composite.spatial_dims();
    g.spacing[0] /= (d / p.record.slices_per_modality.max(1)).max(1) as f64;
    g
}
