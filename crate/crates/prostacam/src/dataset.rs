//! Discovery and validation of patient studies on disk.
//!
//! Default layout: one folder per patient under the dataset root, named by
//! the patient id, holding `t2w`, `adc`, `dwi_b<value>`, `prostate_mask` and
//! optionally `lesion_mask` (each `.nii.gz`, `.nii` or `.mha`; a
//! `<prefix>_` in front of the role name is allowed). Labels come from a
//! manifest CSV, `labels.csv` in the root unless another path is given.
//! Manifest columns `t2w`, `adc`, `dwi`, `dwi_b_value`, `prostate_mask` and
//! `lesion_mask` may point anywhere (relative paths resolve against the
//! root) and override discovery for that patient.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use prostacam_core::preprocess::PatientVolumes;
use prostacam_core::{MaskRole, ModalityKind};

use crate::error::{PipelineError, Result};
use crate::volume_io::{load_mask, load_volume, VolumeFormat};

pub const DEFAULT_MANIFEST: &str = "labels.csv";
pub const PREFERRED_B_VALUE: u32 = 800;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwiSeries {
    pub b_value: u32,
    pub path: PathBuf,
}

/// One patient as found on disk. Fields are optional until validated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: Option<u8>,
    pub t2w: Option<PathBuf>,
    pub adc: Option<PathBuf>,
    pub dwi: Option<DwiSeries>,
    pub prostate_mask: Option<PathBuf>,
    pub lesion_mask: Option<PathBuf>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            label: None,
            t2w: None,
            adc: None,
            dwi: None,
            prostate_mask: None,
            lesion_mask: None,
        }
    }

    pub fn volume_paths(&self) -> BTreeMap<ModalityKind, &Path> {
        let mut m = BTreeMap::new();
        if let Some(p) = &self.t2w {
            m.insert(ModalityKind::T2w, p.as_path());
        }
        if let Some(p) = &self.adc {
            m.insert(ModalityKind::Adc, p.as_path());
        }
        if let Some(d) = &self.dwi {
            if let Ok(k) = ModalityKind::dwi(d.b_value) {
                m.insert(k, d.path.as_path());
            }
        }
        m
    }

    /// Validated label; panics on records that did not pass validation.
    pub fn label(&self) -> u8 {
        self.label.expect("record was validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Element {
    T2w,
    Adc,
    Dwi,
    ProstateMask,
    LesionMask,
    Label,
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Element::T2w => "T2W",
            Element::Adc => "ADC",
            Element::Dwi => "DWI",
            Element::ProstateMask => "prostate mask",
            Element::LesionMask => "lesion mask",
            Element::Label => "label",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    Missing(Element),
    Unreadable { element: Element, message: String },
    Ambiguous(Element),
    EmptyProstateMask,
    InvalidLabel(String),
}

impl Violation {
    pub fn element(&self) -> Element {
        match self {
            Violation::Missing(e) | Violation::Ambiguous(e) => *e,
            Violation::Unreadable { element, .. } => *element,
            Violation::EmptyProstateMask => Element::ProstateMask,
            Violation::InvalidLabel(_) => Element::Label,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing(e) => write!(f, "missing {}", e),
            Violation::Unreadable { element, message } => write!(f, "unreadable {}: {}", element, message),
            Violation::Ambiguous(e) => write!(f, "more than one {} file", e),
            Violation::EmptyProstateMask => f.write_str("empty prostate mask"),
            Violation::InvalidLabel(v) => write!(f, "invalid label `{}` (expected 0 or 1)", v),
        }
    }
}

/// Checks presence and readability of every element. Violations are data.
pub fn validate_record(record: &PatientRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    match record.label {
        None => out.push(Violation::Missing(Element::Label)),
        Some(l) if l > 1 => out.push(Violation::InvalidLabel(l.to_string())),
        Some(_) => {}
    }
    let mut check_volume = |element: Element, path: Option<&Path>, kind: Option<ModalityKind>| match path {
        None => out.push(Violation::Missing(element)),
        Some(p) => {
            if let Some(kind) = kind {
                if let Err(e) = load_volume(p, kind) {
                    out.push(Violation::Unreadable {
                        element,
                        message: e.to_string(),
                    });
                }
            }
        }
    };
    check_volume(Element::T2w, record.t2w.as_deref(), Some(ModalityKind::T2w));
    check_volume(Element::Adc, record.adc.as_deref(), Some(ModalityKind::Adc));
    let dwi_kind = record.dwi.as_ref().and_then(|d| ModalityKind::dwi(d.b_value).ok());
    match (&record.dwi, dwi_kind) {
        (Some(_), None) => out.push(Violation::Unreadable {
            element: Element::Dwi,
            message: "b-value must be positive".into(),
        }),
        (d, k) => check_volume(Element::Dwi, d.as_ref().map(|d| d.path.as_path()), k),
    }
    match &record.prostate_mask {
        None => out.push(Violation::Missing(Element::ProstateMask)),
        Some(p) => match load_mask(p, MaskRole::Prostate) {
            Ok(m) if m.count_nonzero() == 0 => out.push(Violation::EmptyProstateMask),
            Ok(_) => {}
            Err(e) => out.push(Violation::Unreadable {
                element: Element::ProstateMask,
                message: e.to_string(),
            }),
        },
    }
    if let Some(p) = &record.lesion_mask {
        if let Err(e) = load_mask(p, MaskRole::Lesion) {
            out.push(Violation::Unreadable {
                element: Element::LesionMask,
                message: e.to_string(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRecord {
    pub patient_id: String,
    pub violations: Vec<String>,
}

/// Valid records sorted by patient id, plus what was dropped and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCatalog {
    pub records: Vec<PatientRecord>,
    pub n_positive: usize,
    pub n_negative: usize,
    pub excluded: Vec<ExcludedRecord>,
    pub warnings: Vec<String>,
}

impl DatasetCatalog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.patient_id == id)
    }
}

#[derive(Debug, Default)]
struct Discovered {
    t2w: Vec<PathBuf>,
    adc: Vec<PathBuf>,
    dwi: Vec<(u32, PathBuf)>,
    prostate_mask: Vec<PathBuf>,
    lesion_mask: Vec<PathBuf>,
}

fn strip_volume_ext(name: &str) -> Option<&str> {
    [".nii.gz", ".nii", ".mha"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
}

fn role_matches(stem: &str, role: &str) -> bool {
    stem == role || stem.ends_with(&format!("_{}", role))
}

/// Parses `dwi_b<digits>` at the end of a file stem.
fn dwi_b_value(stem: &str) -> Option<u32> {
    let i = stem.rfind("dwi_b")?;
    if i > 0 && !stem[..i].ends_with('_') {
        return None;
    }
    stem[i + 5..].parse().ok()
}

/// Any `b<digits>` token in a file name, for manifest paths without an
/// explicit b-value.
fn b_value_in_name(path: &Path) -> Option<u32> {
    let name = path.file_name()?.to_str()?.to_ascii_lowercase();
    let stem = strip_volume_ext(&name).unwrap_or(&name);
    stem.split(|c: char| !c.is_ascii_alphanumeric())
        .filter_map(|t| t.strip_prefix('b'))
        .filter_map(|d| d.parse::<u32>().ok())
        .next_back()
}

fn discover(dir: &Path) -> Result<Discovered> {
    let mut d = Discovered::default();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    for path in entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()).map(|n| n.to_ascii_lowercase()) else {
            continue;
        };
        let Some(stem) = strip_volume_ext(&name) else {
            continue;
        };
        if role_matches(stem, "t2w") {
            d.t2w.push(path);
        } else if role_matches(stem, "adc") {
            d.adc.push(path);
        } else if role_matches(stem, "prostate_mask") {
            d.prostate_mask.push(path);
        } else if role_matches(stem, "lesion_mask") {
            d.lesion_mask.push(path);
        } else if let Some(b) = dwi_b_value(stem) {
            d.dwi.push((b, path));
        }
    }
    Ok(d)
}

/// b = 800 when present, else the highest b-value with a warning.
pub fn select_dwi(patient_id: &str, mut series: Vec<(u32, PathBuf)>) -> (Option<DwiSeries>, Option<String>) {
    series.sort();
    if let Some((b, p)) = series.iter().find(|(b, _)| *b == PREFERRED_B_VALUE) {
        return (
            Some(DwiSeries {
                b_value: *b,
                path: p.clone(),
            }),
            None,
        );
    }
    match series.pop() {
        None => (None, None),
        Some((b, path)) => (
            Some(DwiSeries { b_value: b, path }),
            Some(format!(
                "{}: no b={} DWI series, using b={}",
                patient_id, PREFERRED_B_VALUE, b
            )),
        ),
    }
}

#[derive(Debug, Default)]
struct ManifestRow {
    label: Option<String>,
    t2w: Option<PathBuf>,
    adc: Option<PathBuf>,
    dwi: Option<PathBuf>,
    dwi_b_value: Option<String>,
    prostate_mask: Option<PathBuf>,
    lesion_mask: Option<PathBuf>,
}

fn read_manifest(path: &Path, root: &Path) -> Result<BTreeMap<String, ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let id_col = col("patient_id").ok_or_else(|| PipelineError::format(path, "manifest needs a patient_id column"))?;
    let label_col = col("label");
    let path_cols = ["t2w", "adc", "dwi", "prostate_mask", "lesion_mask"].map(col);
    let b_col = col("dwi_b_value");

    let mut rows = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()).map(str::to_string);
        let Some(id) = field(Some(id_col)) else {
            continue;
        };
        let p = |i: usize| field(path_cols[i]).map(|s| root.join(s));
        let row = ManifestRow {
            label: field(label_col),
            t2w: p(0),
            adc: p(1),
            dwi: p(2),
            dwi_b_value: field(b_col),
            prostate_mask: p(3),
            lesion_mask: p(4),
        };
        if rows.insert(id.clone(), row).is_some() {
            return Err(PipelineError::DuplicateId(id));
        }
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> PipelineError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PipelineError::io(path, io),
        other => PipelineError::format(path, format!("{:?}", other)),
    }
}

fn pick(patient_id: &str, element: Element, mut found: Vec<PathBuf>, warnings: &mut Vec<String>) -> std::result::Result<Option<PathBuf>, Violation> {
    match found.len() {
        0 => Ok(None),
        1 => Ok(found.pop()),
        _ => {
            warnings.push(format!("{}: more than one {} file", patient_id, element));
            Err(Violation::Ambiguous(element))
        }
    }
}

/// Builds and validates the catalog. `manifest` defaults to
/// `<root>/labels.csv` when that file exists.
pub fn scan_dataset(root: &Path, manifest: Option<&Path>) -> Result<DatasetCatalog> {
    if !root.is_dir() {
        return Err(PipelineError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a readable directory"),
        ));
    }
    let default_manifest = root.join(DEFAULT_MANIFEST);
    let manifest_path = match manifest {
        Some(p) => Some(p.to_path_buf()),
        None => default_manifest.is_file().then_some(default_manifest),
    };
    let mut rows = match &manifest_path {
        Some(p) => read_manifest(p, root)?,
        None => BTreeMap::new(),
    };

    let mut folders = BTreeMap::new();
    for entry in fs::read_dir(root).map_err(|e| PipelineError::io(root, e))? {
        let entry = entry.map_err(|e| PipelineError::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                folders.insert(name.to_string(), path);
            }
        }
    }
    // a folder only counts as a patient when it is listed or holds volumes
    let ids: BTreeSet<String> = rows.keys().cloned().chain(folders.keys().cloned()).collect();

    let mut warnings = Vec::new();
    let mut candidates: Vec<(PatientRecord, Vec<Violation>)> = Vec::new();
    for id in ids {
        let row = rows.remove(&id).unwrap_or_default();
        let found = match folders.get(&id) {
            Some(dir) => discover(dir)?,
            None => Discovered::default(),
        };
        let listed = manifest_path.is_some() && (row.label.is_some() || row.t2w.is_some());
        let has_files = !(found.t2w.is_empty() && found.adc.is_empty() && found.dwi.is_empty());
        if !listed && !has_files {
            continue;
        }
        let mut pre = Vec::new();
        let mut rec = PatientRecord::new(&id);
        rec.label = match row.label.as_deref() {
            None => None,
            Some("0") => Some(0),
            Some("1") => Some(1),
            Some(other) => {
                pre.push(Violation::InvalidLabel(other.to_string()));
                None
            }
        };
        let mut take = |explicit: Option<PathBuf>, element: Element, found: Vec<PathBuf>, pre: &mut Vec<Violation>| match explicit {
            Some(p) => Some(p),
            None => pick(&id, element, found, &mut warnings).unwrap_or_else(|v| {
                pre.push(v);
                None
            }),
        };
        rec.t2w = take(row.t2w, Element::T2w, found.t2w, &mut pre);
        rec.adc = take(row.adc, Element::Adc, found.adc, &mut pre);
        rec.prostate_mask = take(row.prostate_mask, Element::ProstateMask, found.prostate_mask, &mut pre);
        rec.lesion_mask = take(row.lesion_mask, Element::LesionMask, found.lesion_mask, &mut pre);
        rec.dwi = match row.dwi {
            Some(path) => {
                let b = match row.dwi_b_value.as_deref() {
                    Some(s) => s.parse().ok(),
                    None => b_value_in_name(&path),
                };
                let b = b.unwrap_or_else(|| {
                    warnings.push(format!(
                        "{}: DWI b-value not given, assuming b={}",
                        id, PREFERRED_B_VALUE
                    ));
                    PREFERRED_B_VALUE
                });
                if b != PREFERRED_B_VALUE {
                    warnings.push(format!(
                        "{}: no b={} DWI series, using b={}",
                        id, PREFERRED_B_VALUE, b
                    ));
                }
                Some(DwiSeries { b_value: b, path })
            }
            None => {
                let (dwi, warning) = select_dwi(&id, found.dwi);
                warnings.extend(warning);
                dwi
            }
        };
        for p in [&rec.t2w, &rec.adc, &rec.prostate_mask, &rec.lesion_mask].into_iter().flatten() {
            if VolumeFormat::of(p).is_none() {
                warnings.push(format!("{}: unrecognised volume extension {}", id, p.display()));
            }
        }
        candidates.push((rec, pre));
    }

    let checked: Vec<(PatientRecord, Vec<Violation>)> = candidates
        .into_par_iter()
        .map(|(rec, mut pre)| {
            let mut v = validate_record(&rec);
            // keep the more specific pre-validation findings
            v.retain(|x| !pre.iter().any(|p| p.element() == x.element()));
            pre.extend(v);
            (rec, pre)
        })
        .collect();

    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (rec, violations) in checked {
        if violations.is_empty() {
            records.push(rec);
        } else {
            warnings.push(format!(
                "{}: excluded ({})",
                rec.patient_id,
                violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
            ));
            excluded.push(ExcludedRecord {
                patient_id: rec.patient_id,
                violations: violations.iter().map(|v| v.to_string()).collect(),
            });
        }
    }
    if records.is_empty() {
        return Err(PipelineError::EmptyDataset(root.to_path_buf()));
    }
    let n_positive = records.iter().filter(|r| r.label == Some(1)).count();
    Ok(DatasetCatalog {
        n_negative: records.len() - n_positive,
        n_positive,
        records,
        excluded,
        warnings,
    })
}

/// Reads every volume of a validated record.
pub fn load_patient(record: &PatientRecord) -> Result<PatientVolumes> {
    let missing = |e: Element| PipelineError::Core(prostacam_core::Error::Data(format!("{}: missing {}", record.patient_id, e)));
    let t2w = record.t2w.as_deref().ok_or_else(|| missing(Element::T2w))?;
    let adc = record.adc.as_deref().ok_or_else(|| missing(Element::Adc))?;
    let dwi = record.dwi.as_ref().ok_or_else(|| missing(Element::Dwi))?;
    let prostate = record
        .prostate_mask
        .as_deref()
        .ok_or_else(|| missing(Element::ProstateMask))?;
    Ok(PatientVolumes {
        patient_id: record.patient_id.clone(),
        t2w: load_volume(t2w, ModalityKind::T2w)?,
        adc: load_volume(adc, ModalityKind::Adc)?,
        dwi: load_volume(&dwi.path, ModalityKind::dwi(dwi.b_value)?)?,
        prostate: load_mask(prostate, MaskRole::Prostate)?,
        lesion: record
            .lesion_mask
            .as_deref()
            .map(|p| load_mask(p, MaskRole::Lesion))
            .transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_roles() {
        assert!(role_matches("t2w", "t2w"));
        assert!(role_matches("case1_t2w", "t2w"));
        assert!(!role_matches("t2wx", "t2w"));
        assert_eq!(dwi_b_value("dwi_b800"), Some(800));
        assert_eq!(dwi_b_value("p1_dwi_b50"), Some(50));
        assert_eq!(dwi_b_value("xdwi_b50"), None);
        assert_eq!(b_value_in_name(Path::new("x/ep2d_diff_b800.mha")), Some(800));
        assert_eq!(b_value_in_name(Path::new("x/diff.mha")), None);
    }

    #[test]
    fn dwi_selection() {
        let s = vec![(50, PathBuf::from("a")), (800, PathBuf::from("b")), (1400, PathBuf::from("c"))];
        let (d, w) = select_dwi("p", s);
        assert_eq!(d.unwrap().b_value, 800);
        assert!(w.is_none());
        let (d, w) = select_dwi("p", vec![(50, PathBuf::from("a")), (1000, PathBuf::from("c"))]);
        assert_eq!(d.unwrap().b_value, 1000);
        assert!(w.unwrap().contains("b=1000"));
        assert_eq!(select_dwi("p", vec![]), (None, None));
    }
}
