//! Run configuration, stored as TOML. Every field has a default, so an
//! empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prostacam_core::gradcam::ClassPolicy;
use prostacam_core::nn::{Depth, ModelConfig, OptimizerKind};
use prostacam_core::preprocess::{LayoutMode, PreprocessParams};
use prostacam_core::render::DEFAULT_ALPHA;
use prostacam_core::synth::SyntheticSpec;
use prostacam_core::train::TrainConfig;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset location; `<output_dir>/dataset` when unset.
    pub dataset_root: Option<PathBuf>,
    /// Manifest CSV; `<dataset_root>/labels.csv` when unset.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seed for every stage that does not set its own.
    pub seed: u64,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub xai: XaiSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            manifest: None,
            output_dir: PathBuf::from("run"),
            seed: 0,
            preprocess: PreprocessSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            xai: XaiSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Interleaved,
    Channels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub target_slices: usize,
    pub margin_frac: f64,
    pub layout: Layout,
    /// `[height, width]` after cropping; the crop size is kept when unset.
    pub in_plane_size: Option<[usize; 2]>,
    pub mask_outside_prostate: bool,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let p = PreprocessParams::default();
        Self {
            target_slices: p.target_slices,
            margin_frac: p.margin_frac,
            layout: Layout::Interleaved,
            in_plane_size: p.in_plane_size,
            mask_outside_prostate: p.mask_outside_prostate,
        }
    }
}

impl PreprocessSection {
    pub fn params(&self) -> PreprocessParams {
        PreprocessParams {
            target_slices: self.target_slices,
            margin_frac: self.margin_frac,
            layout: self.layout_mode(),
            in_plane_size: self.in_plane_size,
            mask_outside_prostate: self.mask_outside_prostate,
        }
    }

    pub fn layout_mode(&self) -> LayoutMode {
        match self.layout {
            Layout::Interleaved => LayoutMode::Interleaved,
            Layout::Channels => LayoutMode::Channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet34,
    Resnet10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub base_width: usize,
    /// Max-pool after the stem convolution.
    pub stem_pool: bool,
    pub init_checkpoint: Option<PathBuf>,
    pub reset_head: bool,
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            architecture: Architecture::Resnet34,
            base_width: m.base_width,
            stem_pool: m.stem_pool,
            init_checkpoint: None,
            reset_head: m.reset_head,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            optimizer: Optimizer::Adam,
            batch_size: t.batch_size,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassChoice {
    /// Explain the class the model predicted.
    Predicted,
    /// Always explain class 1.
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPolicy {
    /// Each patient's own held-out fold model.
    Fold,
    /// One model trained on the whole cohort.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summation {
    /// Min-max normalize each map, sum, renormalize.
    NormalizedSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceModality {
    T2w,
    Adc,
    Dwi,
}

impl SourceModality {
    pub fn index(self) -> usize {
        match self {
            SourceModality::T2w => 0,
            SourceModality::Adc => 1,
            SourceModality::Dwi => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XaiSection {
    /// Feature layer; `layer4` when unset.
    pub layer: Option<String>,
    pub class_policy: ClassChoice,
    pub model_policy: ModelPolicy,
    pub summation: Summation,
    /// Modality drawn under the overlays.
    pub source_modality: SourceModality,
    pub alpha: f64,
}

impl Default for XaiSection {
    fn default() -> Self {
        Self {
            layer: None,
            class_policy: ClassChoice::Predicted,
            model_policy: ModelPolicy::Fold,
            summation: Summation::NormalizedSum,
            source_modality: SourceModality::T2w,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl XaiSection {
    pub fn class_policy(&self) -> ClassPolicy {
        match self.class_policy {
            ClassChoice::Predicted => ClassPolicy::Predicted,
            ClassChoice::Positive => ClassPolicy::Positive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_patients: usize,
    pub positive_fraction: f64,
    pub grid: [usize; 3],
    pub lesion_radius: [f64; 2],
    pub noise: f64,
    pub seed: Option<u64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            n_patients: s.n_patients,
            positive_fraction: s.positive_fraction,
            grid: s.grid,
            lesion_radius: s.lesion_radius,
            noise: s.noise,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let core = |e: prostacam_core::Error| PipelineError::Config(e.to_string());
        self.model_config().validate().map_err(core)?;
        self.train_config().validate().map_err(core)?;
        let seeds = [Some(self.seed), self.model.seed, self.train.seed, self.synth.seed];
        if seeds.iter().flatten().any(|&s| s > i64::MAX as u64) {
            return Err(PipelineError::Config(format!("seeds must be <= {}", i64::MAX)));
        }
        if self.preprocess.target_slices == 0 {
            return Err(PipelineError::Config("preprocess.target_slices must be >= 1".into()));
        }
        if !(self.preprocess.margin_frac >= 0.0 && self.preprocess.margin_frac.is_finite()) {
            return Err(PipelineError::Config("preprocess.margin_frac must be >= 0".into()));
        }
        if self.preprocess.in_plane_size.is_some_and(|s| s.contains(&0)) {
            return Err(PipelineError::Config("preprocess.in_plane_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.xai.alpha) {
            return Err(PipelineError::Config("xai.alpha must be in [0, 1]".into()));
        }
        if self.xai.layer.as_deref().is_some_and(str::is_empty) {
            return Err(PipelineError::Config("xai.layer must not be empty".into()));
        }
        Ok(())
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.dataset_root
            .clone()
            .unwrap_or_else(|| self.output_dir.join("dataset"))
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            depth: match m.architecture {
                Architecture::Resnet34 => Depth::ResNet34,
                Architecture::Resnet10 => Depth::ResNet10,
            },
            in_channels: self.preprocess.layout_mode().in_channels(),
            n_classes: 2,
            base_width: m.base_width,
            stem_pool: m.stem_pool,
            init_checkpoint: m.init_checkpoint.as_ref().map(|p| p.display().to_string()),
            reset_head: m.reset_head,
            feature_layer: self.xai.layer.clone().unwrap_or_else(|| "layer4".to_string()),
            seed: m.seed.unwrap_or(self.seed),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            optimizer: match t.optimizer {
                Optimizer::Adam => OptimizerKind::Adam,
                Optimizer::Sgd => OptimizerKind::Sgd,
            },
            batch_size: t.batch_size,
            seed: t.seed.unwrap_or(self.seed),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let s = &self.synth;
        SyntheticSpec {
            n_patients: s.n_patients,
            positive_fraction: s.positive_fraction,
            grid: s.grid,
            lesion_radius: s.lesion_radius,
            noise: s.noise,
            seed: s.seed.unwrap_or(self.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.dataset_root = Some("data/prostatex".into());
        c.preprocess.in_plane_size = Some([32, 32]);
        c.preprocess.layout = Layout::Channels;
        c.model.architecture = Architecture::Resnet10;
        c.model.seed = Some(9);
        c.train.learning_rate = 0.1 + 0.2;
        c.xai.layer = Some("layer3".into());
        c.xai.model_policy = ModelPolicy::Final;
        c.synth.noise = 1.0 / 3.0;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_toml(&RunConfig::default().to_toml()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[train]\nepochs = 0").is_err());
        assert!(RunConfig::from_toml("[xai]\nalpha = 2.0").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let e = RunConfig::from_toml("[model]\narchitecture = \"vgg\"").unwrap_err();
        assert_eq!(e.category(), "config");
    }

    #[test]
    fn seeds_fall_back_to_global() {
        let c = RunConfig::from_toml("seed = 5\n[train]\nseed = 2").unwrap();
        assert_eq!(c.train_config().seed, 2);
        assert_eq!(c.model_config().seed, 5);
        assert_eq!(c.synthetic_spec().seed, 5);
        assert_eq!(c.model_config().in_channels, 1);
    }
}
