//! 3D residual classifier.
//!
//! Layer names and tensor names follow the MONAI `ResNet` module
//! (`conv1`, `bn1`, `layer1.0.conv1.weight`, `layer2.0.downsample.0.bias`,
//! `fc.weight`, ...), so converted PyTorch checkpoints load by name.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::layers::Mode;
use super::network::{Network, NetworkBuilder};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::preprocess::CompositeVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Depth {
    /// Basic-block counts `[3, 4, 6, 3]`.
    ResNet34,
    /// Test-scale variant with `[1, 1, 1, 1]`.
    ResNet10,
}

impl Depth {
    pub fn blocks(self) -> [usize; 4] {
        match self {
            Depth::ResNet34 => [3, 4, 6, 3],
            Depth::ResNet10 => [1, 1, 1, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: Depth,
    /// 1 for interleaved composites, 3 for channel-stacked ones.
    pub in_channels: usize,
    pub n_classes: usize,
    /// Width of the first stage; later stages double it. 64 in MONAI.
    pub base_width: usize,
    /// Max-pool after the stem (MONAI's default; `no_max_pool` there).
    pub stem_pool: bool,
    pub init_checkpoint: Option<String>,
    /// Drop any checkpoint tensor of the classification head when loading.
    pub reset_head: bool,
    /// Top-level layer whose output feeds the attention maps.
    pub feature_layer: String,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: Depth::ResNet34,
            in_channels: 1,
            n_classes: 2,
            base_width: 64,
            stem_pool: true,
            init_checkpoint: None,
            reset_head: false,
            feature_layer: "layer4".to_string(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes != 2 {
            return Err(Error::Config(format!(
                "classifier is binary, n_classes must be 2 (got {})",
                self.n_classes
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config(
                "in_channels and base_width must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Binary decision derived from two logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub predicted_class: u8,
    pub probability_positive: f64,
}

impl Prediction {
    /// Class 1 wins only on a strictly larger logit.
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let p = softmax2(logits);
        Self {
            logits,
            predicted_class: u8::from(logits[1] > logits[0]),
            probability_positive: p[1],
        }
    }
}

/// Numerically stable two-way softmax.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = libm::exp(logits[0] - m);
    let e1 = libm::exp(logits[1] - m);
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

pub const HEAD_PREFIX: &str = "fc.";

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T = f32> {
    config: ModelConfig,
    net: Network<T>,
}

impl<T: Real> Classifier<T> {
    /// Builds the network with seeded initialization. Loading
    /// `config.init_checkpoint` is left to the caller (see
    /// [`Classifier::load_pretrained`]).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let [b1, b2, b3, b4] = config.depth.blocks();
        let mut builder = NetworkBuilder::new(config.in_channels, config.seed)
            .conv("conv1", w, 7, 1, 3, false)
            .batch_norm("bn1")
            .relu("relu");
        if config.stem_pool {
            builder = builder.max_pool("maxpool", 3, 2, 1);
        }
        let net = builder
            .stage("layer1", b1, w, 1)
            .stage("layer2", b2, 2 * w, 2)
            .stage("layer3", b3, 4 * w, 2)
            .stage("layer4", b4, 8 * w, 2)
            .global_avg_pool("avgpool")
            .linear("fc", config.n_classes)
            .build()?;
        let c = Self { config, net };
        c.feature_layer_index()?;
        Ok(c)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn feature_layer_index(&self) -> Result<usize> {
        let idx = self.net.layer_index(&self.config.feature_layer)?;
        if !self.net.layers()[idx].1.is_volumetric() {
            return Err(Error::Config(format!(
                "layer `{}` does not produce a volumetric activation",
                self.config.feature_layer
            )));
        }
        Ok(idx)
    }

    pub fn set_feature_layer(&mut self, name: &str) -> Result<()> {
        let previous = core::mem::replace(&mut self.config.feature_layer, name.to_string());
        if let Err(e) = self.feature_layer_index() {
            self.config.feature_layer = previous;
            return Err(e);
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.net.params().parameter_count()
    }

    /// Replaces every tensor whose name and shape match. Head tensors are
    /// skipped when `reset_head` is set. Errors when nothing matched.
    pub fn load_pretrained<'a, I>(&mut self, tensors: I, reset_head: bool) -> Result<LoadReport>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    {
        let (loaded, mut skipped) = self
            .net
            .load_matching(tensors, reset_head.then_some(HEAD_PREFIX));
        if loaded.is_empty() {
            return Err(Error::IncompatibleCheckpoint(
                "no tensor matched the model by name and shape".into(),
            ));
        }
        // model tensors absent from the checkpoint are reported as skipped too
        for e in self.net.params().entries() {
            if !loaded.iter().any(|n| n == &e.name) && !skipped.iter().any(|n| n == &e.name) {
                skipped.push(e.name.clone());
            }
        }
        Ok(LoadReport { loaded, skipped })
    }

    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.infer(input)
    }

    pub fn predict_tensor(&self, input: &Tensor<T>) -> Result<Prediction> {
        let l = self.net.forward(input, Mode::Eval, None)?.logits;
        let d = l.data();
        if d.len() != 2 || !l.all_finite() {
            return Err(Error::Numeric(format!("expected 2 finite logits, got {:?}", d)));
        }
        Ok(Prediction::from_logits([d[0].as_f64(), d[1].as_f64()]))
    }

    pub fn forward(&self, input: &CompositeVolume) -> Result<Prediction> {
        self.predict_tensor(&self.input_tensor(input)?)
    }

    pub fn input_tensor(&self, input: &CompositeVolume) -> Result<Tensor<T>> {
        if input.channels() != self.config.in_channels {
            return Err(Error::Geometry(format!(
                "model expects {} input channels, composite has {}",
                self.config.in_channels,
                input.channels()
            )));
        }
        input.to_tensor()
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            config: self.config.clone(),
            net: self.net.cast(),
        }
    }
}
