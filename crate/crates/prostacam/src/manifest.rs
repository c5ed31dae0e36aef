//! `run_manifest.json`: per-stage config hashes, seeds, artifact checksums
//! and warnings. Holds no timestamps, so reruns leave it byte-identical.
//!
//! Each stage hash covers the config fields the stage reads plus the hash
//! of the stage before it, so changing preprocessing invalidates training,
//! attention maps and the report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Preprocess,
    Train,
    Explain,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Synth | Stage::Ingest => None,
            Stage::Preprocess => Some(Stage::Ingest),
            Stage::Train => Some(Stage::Preprocess),
            Stage::Explain => Some(Stage::Train),
            Stage::Report => Some(Stage::Explain),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Artifact path (relative to the output directory, or absolute for
    /// inputs outside it) to SHA-256.
    pub checksums: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// SHA-256 of the compact JSON of `value`. Struct fields serialize in
/// declaration order and maps are sorted, so the text is canonical.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes to JSON"))
}

/// Hash of everything `stage` (and every stage before it) reads.
pub fn stage_hash(cfg: &RunConfig, stage: Stage) -> String {
    let up = stage.upstream().map(|s| stage_hash(cfg, s));
    let own = match stage {
        Stage::Synth => serde_json::json!({
            "synth": cfg.synth,
            "seed": cfg.synthetic_spec().seed,
            "root": cfg.dataset_root(),
        }),
        Stage::Ingest => serde_json::json!({ "root": cfg.dataset_root(), "manifest": cfg.manifest }),
        Stage::Preprocess => serde_json::json!({ "preprocess": cfg.preprocess }),
        Stage::Train => serde_json::json!({
            "model": cfg.model,
            "train": cfg.train,
            "model_seed": cfg.model_config().seed,
            "train_seed": cfg.train_config().seed,
            "feature_layer": cfg.model_config().feature_layer,
        }),
        Stage::Explain => serde_json::json!({
            "layer": cfg.xai.layer,
            "class_policy": cfg.xai.class_policy,
            "model_policy": cfg.xai.model_policy,
            "summation": cfg.xai.summation,
        }),
        Stage::Report => serde_json::json!({
            "source_modality": cfg.xai.source_modality,
            "alpha": cfg.xai.alpha,
        }),
    };
    canonical_hash(&serde_json::json!({ "stage": stage.name(), "config": own, "upstream": up }))
}

impl RunManifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(FILE_NAME);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::format(&path, e.to_string()))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
        let path = out.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
    }

    /// Errors unless `stage`'s upstream ran with the current config.
    pub fn require_upstream(&self, cfg: &RunConfig, stage: Stage) -> Result<()> {
        let Some(up) = stage.upstream() else {
            return Ok(());
        };
        match self.stages.get(up.name()) {
            None => Err(PipelineError::MissingStage(up.name())),
            Some(rec) if rec.config_hash != stage_hash(cfg, up) => {
                Err(PipelineError::ConfigChanged { stage: up.name() })
            }
            Some(_) => Ok(()),
        }
    }

    pub fn record(&mut self, stage: Stage, rec: StageRecord) {
        self.stages.insert(stage.name().to_string(), rec);
    }
}
