//! Sequential network of named top-level layers.
//!
//! Top-level names double as attention-layer identifiers: the activation
//! "at" a layer is that layer's output.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::layers::{
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, BasicBlock,
    BatchNorm3d, BlockCache, BnCache, Conv3d, Linear, MaxPool3d, Mode, PoolCache,
};
use super::params::{EntryKind, Grads, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv3d),
    BatchNorm(BatchNorm3d),
    Relu,
    MaxPool(MaxPool3d),
    Stage(Vec<BasicBlock>),
    GlobalAvgPool,
    Linear(Linear),
}

impl Layer {
    /// True when the layer's output is a `[N, C, D, H, W]` activation.
    pub fn is_volumetric(&self) -> bool {
        !matches!(self, Layer::GlobalAvgPool | Layer::Linear(_))
    }
}

#[derive(Debug, Clone)]
enum NodeCache<T> {
    Input(Tensor<T>),
    Bn(BnCache<T>),
    Output(Tensor<T>),
    Pool(PoolCache),
    Stage(Vec<BlockCache<T>>),
    Shape(Vec<usize>),
}

/// Forward record needed to backpropagate.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<NodeCache<T>>,
    first: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    /// Output of the layer requested as tap, if any.
    pub tapped: Option<Tensor<T>>,
    pub tape: Tape<T>,
}

/// Where backpropagation stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// Parameters only; the input gradient is not formed.
    Params,
    /// Gradient with respect to the network input.
    Input,
    /// Gradient with respect to the output of the given top-level layer.
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<(String, Layer)>,
    store: ParamStore<T>,
    in_channels: usize,
}

impl<T: Real> Network<T> {
    pub fn layers(&self) -> &[(String, Layer)] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("layer `{}` not found", name)))
    }

    fn run_node(
        &self,
        layer: &Layer,
        x: Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, NodeCache<T>)> {
        let store = &self.store;
        Ok(match layer {
            Layer::Conv(c) => {
                let y = c.forward(store, &x)?;
                (y, NodeCache::Input(x))
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward(store, &x, mode)?;
                (y, NodeCache::Bn(cache))
            }
            Layer::Relu => {
                let y = relu_forward(&x);
                (y.clone(), NodeCache::Output(y))
            }
            Layer::MaxPool(p) => {
                let (y, cache) = p.forward(&x)?;
                (y, NodeCache::Pool(cache))
            }
            Layer::Stage(blocks) => {
                let mut caches = Vec::with_capacity(blocks.len());
                let mut h = x;
                for b in blocks {
                    let (y, c) = b.forward(store, h, mode)?;
                    caches.push(c);
                    h = y;
                }
                (h, NodeCache::Stage(caches))
            }
            Layer::GlobalAvgPool => {
                let shape = x.shape().to_vec();
                (global_avg_pool_forward(&x)?, NodeCache::Shape(shape))
            }
            Layer::Linear(l) => {
                let y = l.forward(store, &x)?;
                (y, NodeCache::Input(x))
            }
        })
    }

    /// Runs the network, recording what backward needs. `tap` names a
    /// top-level layer whose output is copied into the result.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, tap: Option<usize>) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        self.forward_range(0, x.clone(), mode, tap)
    }

    fn forward_range(
        &self,
        first: usize,
        x: Tensor<T>,
        mode: Mode,
        tap: Option<usize>,
    ) -> Result<ForwardPass<T>> {
        let mut caches = Vec::with_capacity(self.layers.len() - first);
        let mut tapped = None;
        let mut h = x;
        for (i, (_, layer)) in self.layers.iter().enumerate().skip(first) {
            let (y, cache) = self.run_node(layer, h, mode)?;
            if tap == Some(i) {
                tapped = Some(y.clone());
            }
            caches.push(cache);
            h = y;
        }
        Ok(ForwardPass {
            logits: h,
            tapped,
            tape: Tape { caches, first },
        })
    }

    /// Feeds `activation` as the output of layer `after` and runs the rest
    /// of the network.
    pub fn forward_from(&self, after: usize, activation: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        if after >= self.layers.len() {
            return Err(Error::Config(format!("no layer with index {}", after)));
        }
        self.forward_range(after + 1, activation.clone(), mode, None)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, Mode::Eval, None)?.logits)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::Geometry(format!(
                "network expects [N, {}, D, H, W] input, got {:?}",
                self.in_channels, s
            )));
        }
        Ok(())
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        for (i, cache) in tape.caches.iter().enumerate() {
            match (&self.layers[tape.first + i].1, cache) {
                (Layer::BatchNorm(bn), NodeCache::Bn(c)) => bn.commit(&mut self.store, c),
                (Layer::Stage(blocks), NodeCache::Stage(cs)) => {
                    for (b, c) in blocks.iter().zip(cs) {
                        b.commit(&mut self.store, c);
                    }
                }
                _ => {}
            }
        }
    }

    /// Backpropagates `dout` (gradient of the objective with respect to the
    /// network output) through the recorded pass.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dout: Tensor<T>,
        target: GradTarget,
        grads: Option<&mut Grads<T>>,
    ) -> Result<Option<Tensor<T>>> {
        let stop = match target {
            GradTarget::Layer(i) => {
                if i + 1 < tape.first || i >= self.layers.len() {
                    return Err(Error::Config(format!("layer index {} not on the tape", i)));
                }
                i + 1
            }
            _ => tape.first,
        };
        let mut grads = grads;
        let store = &self.store;
        let mut dy = dout;
        for idx in (stop..self.layers.len()).rev() {
            let cache = &tape.caches[idx - tape.first];
            let layer = &self.layers[idx].1;
            let first_layer = idx == tape.first;
            let need_dx = !(first_layer && target == GradTarget::Params);
            dy = match (layer, cache) {
                (Layer::Conv(c), NodeCache::Input(x)) => {
                    match c.backward(store, x, &dy, grads.as_deref_mut(), need_dx) {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                (Layer::BatchNorm(bn), NodeCache::Bn(c)) => {
                    bn.backward(store, c, &dy, grads.as_deref_mut())
                }
                (Layer::Relu, NodeCache::Output(y)) => relu_backward(y, &dy),
                (Layer::MaxPool(p), NodeCache::Pool(c)) => p.backward(c, &dy),
                (Layer::Stage(blocks), NodeCache::Stage(cs)) => {
                    let mut d = dy;
                    for (b, c) in blocks.iter().zip(cs).rev() {
                        d = b.backward(store, c, &d, grads.as_deref_mut());
                    }
                    d
                }
                (Layer::GlobalAvgPool, NodeCache::Shape(s)) => global_avg_pool_backward(s, &dy),
                (Layer::Linear(l), NodeCache::Input(x)) => {
                    l.backward(store, x, &dy, grads.as_deref_mut())
                }
                _ => unreachable!("tape does not match layer list"),
            };
        }
        Ok(match target {
            GradTarget::Params => None,
            _ => Some(dy),
        })
    }

    /// Copies tensors whose name and shape match; returns (loaded, skipped).
    pub fn load_matching<'a, I>(&mut self, tensors: I, exclude_prefix: Option<&str>) -> (Vec<String>, Vec<String>)
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    {
        let mut loaded = Vec::new();
        let mut skipped = Vec::new();
        for (name, shape, data) in tensors {
            let excluded = exclude_prefix.is_some_and(|p| name.starts_with(p));
            match self.store.find(name) {
                Some(id) if !excluded && self.store.get(id).shape() == shape => {
                    let dst = self.store.get_mut(id).data_mut();
                    dst.iter_mut().zip(data).for_each(|(d, &s)| *d = T::of(s as f64));
                    loaded.push(name.to_string());
                }
                _ => skipped.push(name.to_string()),
            }
        }
        (loaded, skipped)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut store = ParamStore::new();
        for e in self.store.entries() {
            store.push(e.name.clone(), e.value.cast(), e.kind);
        }
        Network {
            layers: self.layers.clone(),
            store,
            in_channels: self.in_channels,
        }
    }
}

/// Incremental constructor with seeded initialization.
///
/// Convolutions use He-normal (fan-out) weights, linear layers a uniform
/// `±1/sqrt(fan_in)` weight with zero bias, batch norms unit scale and zero
/// shift.
pub struct NetworkBuilder<T> {
    layers: Vec<(String, Layer)>,
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    in_channels: usize,
    channels: usize,
    flat: bool,
}

impl<T: Real> NetworkBuilder<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            in_channels,
            channels: in_channels,
            flat: false,
        }
    }

    fn param(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.fill(T::one()),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::of(dist.sample(&mut self.rng)));
            }
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::of(self.rng.sample(dist)));
            }
        }
        let kind = if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            EntryKind::Buffer
        } else {
            EntryKind::Param
        };
        self.store.push(name, t, kind)
    }

    fn make_conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Conv3d {
        let fan_out = (cout * kernel.pow(3)) as f64;
        let fan_in = (cin * kernel.pow(3)) as f64;
        let weight = self.param(
            format!("{}.weight", prefix),
            &[cout, cin, kernel, kernel, kernel],
            Init::Normal(libm::sqrt(2.0 / fan_out)),
        );
        let bias = bias.then(|| {
            self.param(
                format!("{}.bias", prefix),
                &[cout],
                Init::Uniform(1.0 / libm::sqrt(fan_in)),
            )
        });
        Conv3d {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
        }
    }

    fn make_bn(&mut self, prefix: &str, channels: usize) -> BatchNorm3d {
        BatchNorm3d {
            weight: self.param(format!("{}.weight", prefix), &[channels], Init::Ones),
            bias: self.param(format!("{}.bias", prefix), &[channels], Init::Zeros),
            running_mean: self.param(format!("{}.running_mean", prefix), &[channels], Init::Zeros),
            running_var: self.param(format!("{}.running_var", prefix), &[channels], Init::Ones),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn conv(
        mut self,
        name: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let c = self.make_conv(name, self.channels, out_channels, kernel, stride, padding, bias);
        self.channels = out_channels;
        self.layers.push((name.to_string(), Layer::Conv(c)));
        self
    }

    pub fn batch_norm(mut self, name: &str) -> Self {
        let bn = self.make_bn(name, self.channels);
        self.layers.push((name.to_string(), Layer::BatchNorm(bn)));
        self
    }

    pub fn relu(mut self, name: &str) -> Self {
        self.layers.push((name.to_string(), Layer::Relu));
        self
    }

    pub fn max_pool(mut self, name: &str, kernel: usize, stride: usize, padding: usize) -> Self {
        self.layers.push((
            name.to_string(),
            Layer::MaxPool(MaxPool3d {
                kernel,
                stride,
                padding,
            }),
        ));
        self
    }

    /// Residual stage of `blocks` basic blocks; the first block applies
    /// `stride` and gets a 1×1×1 projection shortcut when the shape changes.
    pub fn stage(mut self, name: &str, blocks: usize, out_channels: usize, stride: usize) -> Self {
        let mut list = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let prefix = format!("{}.{}", name, i);
            let (cin, s) = if i == 0 {
                (self.channels, stride)
            } else {
                (out_channels, 1)
            };
            let conv1 = self.make_conv(&format!("{}.conv1", prefix), cin, out_channels, 3, s, 1, false);
            let bn1 = self.make_bn(&format!("{}.bn1", prefix), out_channels);
            let conv2 =
                self.make_conv(&format!("{}.conv2", prefix), out_channels, out_channels, 3, 1, 1, false);
            let bn2 = self.make_bn(&format!("{}.bn2", prefix), out_channels);
            let downsample = (s != 1 || cin != out_channels).then(|| {
                let c = self.make_conv(&format!("{}.downsample.0", prefix), cin, out_channels, 1, s, 0, true);
                let b = self.make_bn(&format!("{}.downsample.1", prefix), out_channels);
                (c, b)
            });
            list.push(BasicBlock {
                conv1,
                bn1,
                conv2,
                bn2,
                downsample,
            });
        }
        if blocks > 0 {
            self.channels = out_channels;
        }
        self.layers.push((name.to_string(), Layer::Stage(list)));
        self
    }

    pub fn global_avg_pool(mut self, name: &str) -> Self {
        self.flat = true;
        self.layers.push((name.to_string(), Layer::GlobalAvgPool));
        self
    }

    pub fn linear(mut self, name: &str, out_features: usize) -> Self {
        let fan_in = self.channels;
        let weight = self.param(
            format!("{}.weight", name),
            &[out_features, fan_in],
            Init::Uniform(1.0 / libm::sqrt(fan_in as f64)),
        );
        let bias = self.param(format!("{}.bias", name), &[out_features], Init::Zeros);
        self.channels = out_features;
        self.layers.push((
            name.to_string(),
            Layer::Linear(Linear {
                weight,
                bias,
                in_features: fan_in,
                out_features,
            }),
        ));
        self
    }

    pub fn build(self) -> Result<Network<T>> {
        match self.layers.last() {
            Some((_, Layer::Linear(_))) if self.flat => Ok(Network {
                layers: self.layers,
                store: self.store,
                in_channels: self.in_channels,
            }),
            _ => Err(Error::Config(
                "network must end with global pooling followed by a linear head".into(),
            )),
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}
