//! Primitive 3D layers with hand-written backward passes.
//!
//! Activations are `[N, C, D, H, W]`; the head works on `[N, F]`. Layers
//! refer to their tensors by index into a [`ParamStore`], so the same layer
//! description serves `f32` and `f64` networks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{Grads, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn spatial(shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 5 {
        return Err(Error::Geometry(format!(
            "expected a [N, C, D, H, W] activation, got {:?}",
            shape
        )));
    }
    Ok([shape[2], shape[3], shape[4]])
}

#[inline]
fn out_len(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Half-open range of output positions whose input tap `o*s + kk - p`
/// falls inside `0..n`.
#[inline]
fn valid_range(n: usize, on: usize, kk: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
    let hi = if n + p > kk { (n + p - kk).div_ceil(s).min(on) } else { 0 };
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (o, &n) in out.iter_mut().zip(dims.iter()) {
            if n + 2 * self.padding < self.kernel {
                return Err(Error::Geometry(format!(
                    "input extent {} too small for kernel {} with padding {}",
                    n, self.kernel, self.padding
                )));
            }
            *o = out_len(n, self.kernel, self.stride, self.padding);
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Real>(&self, x: &[T], dims: [usize; 3], out: [usize; 3], cols: &mut [T]) {
        let [d, h, w] = dims;
        let [od, oh, ow] = out;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = od * oh * ow;
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &x[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..k {
                let (z0, z1) = valid_range(d, od, kz, s, p);
                for ky in 0..k {
                    let (y0, y1) = valid_range(h, oh, ky, s, p);
                    for kx in 0..k {
                        let (x0, x1) = valid_range(w, ow, kx, s, p);
                        let dst = &mut cols[row * plane..(row + 1) * plane];
                        dst.fill(T::zero());
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let src = (iz * h + iy) * w;
                                let o = (oz * oh + oy) * ow;
                                if s == 1 {
                                    let ix0 = x0 + kx - p;
                                    dst[o + x0..o + x1]
                                        .copy_from_slice(&xc[src + ix0..src + ix0 + (x1 - x0)]);
                                } else {
                                    for ox in x0..x1 {
                                        dst[o + ox] = xc[src + ox * s + kx - p];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dims: [usize; 3], out: [usize; 3], dx: &mut [T]) {
        let [d, h, w] = dims;
        let [od, oh, ow] = out;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = od * oh * ow;
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..k {
                let (z0, z1) = valid_range(d, od, kz, s, p);
                for ky in 0..k {
                    let (y0, y1) = valid_range(h, oh, ky, s, p);
                    for kx in 0..k {
                        let (x0, x1) = valid_range(w, ow, kx, s, p);
                        let src = &cols[row * plane..(row + 1) * plane];
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let base = (iz * h + iy) * w;
                                let o = (oz * oh + oy) * ow;
                                for ox in x0..x1 {
                                    xc[base + ox * s + kx - p] += src[o + ox];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = spatial(x.shape())?;
        if x.shape()[1] != self.in_channels {
            return Err(Error::Geometry(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.shape()[1]
            )));
        }
        let out = self.output_dims(dims)?;
        let n = x.shape()[0];
        let plane = out[0] * out[1] * out[2];
        let kdim = self.in_channels * self.kernel.pow(3);
        let mut y = Tensor::zeros(&[n, self.out_channels, out[0], out[1], out[2]]);
        let weight = store.get(self.weight).data();
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kdim * plane]
        };
        for b in 0..n {
            let xs = x.sample(b);
            let src: &[T] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, dims, out, &mut cols);
                &cols
            };
            let ys = y.sample_mut(b);
            T::gemm(
                self.out_channels,
                kdim,
                plane,
                weight,
                false,
                src,
                false,
                ys,
                false,
            );
            if let Some(bias) = self.bias {
                let bias = store.get(bias).data();
                for (co, row) in ys.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients (when `grads` is given) and returns the
    /// input gradient when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let dims = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let out = [dy.shape()[2], dy.shape()[3], dy.shape()[4]];
        let n = x.shape()[0];
        let plane = out[0] * out[1] * out[2];
        let kdim = self.in_channels * self.kernel.pow(3);
        let weight = store.get(self.weight).data();
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); kdim * plane]
        };
        let mut dcols = if need_dx && !pointwise {
            vec![T::zero(); kdim * plane]
        } else {
            Vec::new()
        };
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut grads = grads;
        for b in 0..n {
            let dys = dy.sample(b);
            if let Some(g) = grads.as_deref_mut() {
                let xs = x.sample(b);
                let src: &[T] = if pointwise {
                    xs
                } else {
                    self.im2col(xs, dims, out, &mut cols);
                    &cols
                };
                T::gemm(
                    self.out_channels,
                    plane,
                    kdim,
                    dys,
                    false,
                    src,
                    true,
                    g.slot(self.weight),
                    true,
                );
                if let Some(bias) = self.bias {
                    let gb = g.slot(bias);
                    for (co, row) in dys.chunks(plane).enumerate() {
                        gb[co] += row.iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = dx.sample_mut(b);
                if pointwise {
                    T::gemm(
                        kdim,
                        self.out_channels,
                        plane,
                        weight,
                        true,
                        dys,
                        false,
                        dxs,
                        false,
                    );
                } else {
                    T::gemm(
                        kdim,
                        self.out_channels,
                        plane,
                        weight,
                        true,
                        dys,
                        false,
                        &mut dcols,
                        false,
                    );
                    self.col2im(&dcols, dims, out, dxs);
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d {
    pub weight: usize,
    pub bias: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
    /// batch mean and unbiased variance, pending a running-stat update
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl BatchNorm3d {
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BnCache<T>)> {
        spatial(x.shape())?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if c != self.channels {
            return Err(Error::Geometry(format!(
                "batch norm expects {} channels, got {}",
                self.channels, c
            )));
        }
        let per = x.len() / (n * c);
        let count = n * per;
        let eps = T::of(self.eps);
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x.sample(b)[ch * per..(ch + 1) * per].iter().copied().sum::<T>();
                    }
                    let m = s / T::of(count as f64);
                    let mut v = T::zero();
                    for b in 0..n {
                        for &xv in &x.sample(b)[ch * per..(ch + 1) * per] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / T::of(count as f64);
                }
                let unbiased: Vec<T> = if count > 1 {
                    let f = T::of(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = (mean.clone(), unbiased);
                (mean, var, Some(stats))
            }
            Mode::Eval => (
                store.get(self.running_mean).data().to_vec(),
                store.get(self.running_var).data().to_vec(),
                None,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = store.get(self.weight).data();
        let beta = store.get(self.bias).data();
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            let xs = x.sample(b);
            let hs = x_hat.sample_mut(b);
            for ch in 0..c {
                for i in ch * per..(ch + 1) * per {
                    hs[i] = (xs[i] - mean[ch]) * inv_std[ch];
                }
            }
            let ys = y.sample_mut(b);
            for ch in 0..c {
                for i in ch * per..(ch + 1) * per {
                    ys[i] = gamma[ch] * hs[i] + beta[ch];
                }
            }
        }
        Ok((
            y,
            BnCache {
                x_hat,
                inv_std,
                mode,
                batch_stats,
            },
        ))
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = T::of(self.momentum);
            let keep = T::one() - m;
            for (r, &v) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(var) {
                *r = keep * *r + m * v;
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
    ) -> Tensor<T> {
        let (n, c) = (dy.shape()[0], dy.shape()[1]);
        let per = dy.len() / (n * c);
        let count = T::of((n * per) as f64);
        let gamma = store.get(self.weight).data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for b in 0..n {
            let ds = dy.sample(b);
            let hs = cache.x_hat.sample(b);
            for ch in 0..c {
                for i in ch * per..(ch + 1) * per {
                    sum_dy[ch] += ds[i];
                    sum_dy_xhat[ch] += ds[i] * hs[i];
                }
            }
        }
        if let Some(g) = grads {
            g.slot(self.weight)
                .iter_mut()
                .zip(&sum_dy_xhat)
                .for_each(|(a, &v)| *a += v);
            g.slot(self.bias)
                .iter_mut()
                .zip(&sum_dy)
                .for_each(|(a, &v)| *a += v);
        }
        let mut dx = Tensor::zeros(dy.shape());
        for b in 0..n {
            let ds = dy.sample(b);
            let hs = cache.x_hat.sample(b);
            let dxs = dx.sample_mut(b);
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                match cache.mode {
                    Mode::Train => {
                        let mean_dy = sum_dy[ch] / count;
                        let mean_dy_xhat = sum_dy_xhat[ch] / count;
                        for i in ch * per..(ch + 1) * per {
                            dxs[i] = scale * (ds[i] - mean_dy - hs[i] * mean_dy_xhat);
                        }
                    }
                    Mode::Eval => {
                        for i in ch * per..(ch + 1) * per {
                            dxs[i] = scale * ds[i];
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::zero()) {
            *v = T::zero()
        }
    });
    y
}

/// `out` is the forward output of the ReLU.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(out.data())
        .for_each(|(d, &o)| {
            if !(o > T::zero()) {
                *d = T::zero()
            }
        });
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool3d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl MaxPool3d {
    pub fn output_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|n| out_len(n, self.kernel, self.stride, self.padding))
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
        let [d, h, w] = spatial(x.shape())?;
        let out = self.output_dims([d, h, w]);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut y = Tensor::zeros(&[n, c, out[0], out[1], out[2]]);
        let mut argmax = Vec::with_capacity(y.len());
        let vol = d * h * w;
        let ydata = y.data_mut();
        let mut o = 0;
        for nc in 0..n * c {
            let xs = &x.data()[nc * vol..(nc + 1) * vol];
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for kz in 0..k {
                            let iz = (oz * s + kz) as isize - p as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let i = (iz as usize * h + iy as usize) * w + ix as usize;
                                    if xs[i] > best {
                                        best = xs[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        ydata[o] = best;
                        argmax.push(best_i as u32);
                        o += 1;
                    }
                }
            }
        }
        Ok((
            y,
            PoolCache {
                input_shape: x.shape().to_vec(),
                argmax,
            },
        ))
    }

    pub fn backward<T: Real>(&self, cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(&cache.input_shape);
        let s = &cache.input_shape;
        let vol = s[2] * s[3] * s[4];
        let plane = dy.len() / (s[0] * s[1]);
        let dxd = dx.data_mut();
        for (o, (&g, &i)) in dy.data().iter().zip(&cache.argmax).enumerate() {
            let nc = o / plane;
            dxd[nc * vol + i as usize] += g;
        }
        dx
    }
}

pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    spatial(x.shape())?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let per = x.len() / (n * c);
    let scale = T::one() / T::of(per as f64);
    let data = x
        .data()
        .chunks(per)
        .map(|ch| ch.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let per = dx.len() / (input_shape[0] * input_shape[1]);
    let scale = T::one() / T::of(per as f64);
    for (chunk, &g) in dx.data_mut().chunks_mut(per).zip(dy.data()) {
        chunk.iter_mut().for_each(|v| *v = g * scale);
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::Geometry(format!(
                "linear expects [N, {}], got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut y = Tensor::zeros(&[n, self.out_features]);
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            store.get(self.weight).data(),
            true,
            y.data_mut(),
            false,
        );
        let bias = store.get(self.bias).data();
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
        }
        Ok(y)
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
    ) -> Tensor<T> {
        let n = x.shape()[0];
        if let Some(g) = grads {
            T::gemm(
                self.out_features,
                n,
                self.in_features,
                dy.data(),
                true,
                x.data(),
                false,
                g.slot(self.weight),
                true,
            );
            let gb = g.slot(self.bias);
            for row in dy.data().chunks(self.out_features) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            dy.data(),
            false,
            store.get(self.weight).data(),
            false,
            dx.data_mut(),
            false,
        );
        dx
    }
}

/// Residual basic block: conv-bn-relu-conv-bn plus shortcut, then relu.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv3d,
    pub bn1: BatchNorm3d,
    pub conv2: Conv3d,
    pub bn2: BatchNorm3d,
    pub downsample: Option<(Conv3d, BatchNorm3d)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    hidden: Tensor<T>,
    bn2: BnCache<T>,
    down: Option<BnCache<T>>,
    output: Tensor<T>,
}

impl BasicBlock {
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let c1 = self.conv1.forward(store, &x)?;
        let (b1, bn1) = self.bn1.forward(store, &c1, mode)?;
        drop(c1);
        let hidden = relu_forward(&b1);
        drop(b1);
        let c2 = self.conv2.forward(store, &hidden)?;
        let (mut out, bn2) = self.bn2.forward(store, &c2, mode)?;
        let down = match &self.downsample {
            Some((conv, bn)) => {
                let cd = conv.forward(store, &x)?;
                let (sc, cache) = bn.forward(store, &cd, mode)?;
                out.data_mut()
                    .iter_mut()
                    .zip(sc.data())
                    .for_each(|(o, &s)| *o += s);
                Some(cache)
            }
            None => {
                if out.shape() != x.shape() {
                    return Err(Error::Geometry(format!(
                        "identity shortcut shape mismatch {:?} vs {:?}",
                        out.shape(),
                        x.shape()
                    )));
                }
                out.data_mut()
                    .iter_mut()
                    .zip(x.data())
                    .for_each(|(o, &s)| *o += s);
                None
            }
        };
        let output = relu_forward(&out);
        Ok((
            output.clone(),
            BlockCache {
                input: x,
                bn1,
                hidden,
                bn2,
                down,
                output,
            },
        ))
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &BlockCache<T>) {
        self.bn1.commit(store, &cache.bn1);
        self.bn2.commit(store, &cache.bn2);
        if let (Some((_, bn)), Some(c)) = (&self.downsample, &cache.down) {
            bn.commit(store, c);
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
    ) -> Tensor<T> {
        let mut grads = grads;
        let d_sum = relu_backward(&cache.output, dy);
        let d_c2 = self.bn2.backward(store, &cache.bn2, &d_sum, grads.as_deref_mut());
        let d_hidden = self
            .conv2
            .backward(store, &cache.hidden, &d_c2, grads.as_deref_mut(), true)
            .expect("dx requested");
        let d_b1 = relu_backward(&cache.hidden, &d_hidden);
        let d_c1 = self.bn1.backward(store, &cache.bn1, &d_b1, grads.as_deref_mut());
        let mut dx = self
            .conv1
            .backward(store, &cache.input, &d_c1, grads.as_deref_mut(), true)
            .expect("dx requested");
        match (&self.downsample, &cache.down) {
            (Some((conv, bn)), Some(bc)) => {
                let d_cd = bn.backward(store, bc, &d_sum, grads.as_deref_mut());
                let d_sc = conv
                    .backward(store, &cache.input, &d_cd, grads, true)
                    .expect("dx requested");
                dx.data_mut()
                    .iter_mut()
                    .zip(d_sc.data())
                    .for_each(|(a, &b)| *a += b);
            }
            _ => dx
                .data_mut()
                .iter_mut()
                .zip(d_sum.data())
                .for_each(|(a, &b)| *a += b),
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges_match_brute_force() {
        for n in 1..9 {
            for k in 1..8 {
                for s in 1..3 {
                    for p in 0..4 {
                        if n + 2 * p < k {
                            continue;
                        }
                        let on = out_len(n, k, s, p);
                        for kk in 0..k {
                            let valid: Vec<usize> = (0..on)
                                .filter(|&o| {
                                    let i = (o * s + kk) as isize - p as isize;
                                    i >= 0 && i < n as isize
                                })
                                .collect();
                            let (lo, hi) = valid_range(n, on, kk, s, p);
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, valid, "n={n} k={k} s={s} p={p} kk={kk}");
                        }
                    }
                }
            }
        }
    }
}
