//! Grad-CAM++ attention maps and their aggregation.
//!
//! For a class score `S_c` (the class logit) and the activation `A` of a
//! volumetric layer, with `g = ∂S_c/∂A`:
//!
//! ```text
//! α_k(v) = g_k(v)² / (2·g_k(v)² + Σ_u A_k(u) · g_k(v)³ + ε)
//! w_k    = Σ_v α_k(v) · relu(g_k(v))
//! map(v) = relu(Σ_k w_k · A_k(v))
//! ```
//!
//! This is the exponentiated-score form, in which the second and third
//! derivatives reduce to powers of `g`. The map is then trilinearly
//! upsampled to the input grid and min-max normalized.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::interp::resize_trilinear;
use crate::metrics::OutcomeCategory;
use crate::nn::{Classifier, GradTarget, Mode, Network, Real, Tensor};
use crate::preprocess::CompositeVolume;
use crate::volume::Grid3;

/// Denominator guard in α.
pub const ALPHA_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Values in [0, 1] on the network input's spatial grid.
    pub values: Grid3<f32>,
    pub class_index: u8,
    pub layer_id: String,
    pub patient_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummedAttentionMap {
    pub values: Grid3<f32>,
    pub category: OutcomeCategory,
    pub n_contributors: usize,
}

/// Which class the attention explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ClassPolicy {
    #[default]
    Predicted,
    Positive,
}

/// Closed-form Grad-CAM++ at feature resolution.
///
/// `activation` and `gradient` are `[1, K, d, h, w]`; the result is the
/// raw (unnormalized, rectified) `d × h × w` map.
pub fn gradcam_pp_closed_form<T: Real>(activation: &Tensor<T>, gradient: &Tensor<T>) -> Result<Grid3<f64>> {
    let s = activation.shape();
    if s.len() != 5 || s[0] != 1 || gradient.shape() != s {
        return Err(Error::Geometry(format!(
            "expected matching [1, K, d, h, w] activation and gradient, got {:?} and {:?}",
            s,
            gradient.shape()
        )));
    }
    if !gradient.all_finite() || !activation.all_finite() {
        return Err(Error::Numeric("non-finite activation or gradient".into()));
    }
    let (k, spatial) = (s[1], s[2] * s[3] * s[4]);
    let a = activation.data();
    let g = gradient.data();
    let mut map = vec![0.0f64; spatial];
    for c in 0..k {
        let ak = &a[c * spatial..(c + 1) * spatial];
        let gk = &g[c * spatial..(c + 1) * spatial];
        let sum_a: f64 = ak.iter().map(|v| v.as_f64()).sum();
        let mut w = 0.0;
        for &gv in gk {
            let gv = gv.as_f64();
            let g2 = gv * gv;
            let alpha = g2 / (2.0 * g2 + sum_a * g2 * gv + ALPHA_EPS);
            w += alpha * gv.max(0.0);
        }
        if w != 0.0 {
            for (m, &av) in map.iter_mut().zip(ak) {
                *m += w * av.as_f64();
            }
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    Grid3::from_vec([s[2], s[3], s[4]], map)
}

/// Min-max scaling to [0, 1]. An all-zero grid stays zero; any other
/// constant grid becomes all ones.
pub fn normalize_map(grid: &Grid3<f32>) -> Grid3<f32> {
    let (lo, hi) = grid
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo > 0.0 {
        let range = (hi - lo) as f64;
        grid.map(|v| (((v - lo) as f64 / range) as f32).clamp(0.0, 1.0))
    } else if hi > 0.0 {
        grid.map(|_| 1.0)
    } else {
        grid.map(|_| 0.0)
    }
}

/// Intermediate quantities of one Grad-CAM++ evaluation.
#[derive(Debug, Clone)]
pub struct GradCamTrace<T> {
    pub score: f64,
    pub activation: Tensor<T>,
    pub gradient: Tensor<T>,
    pub raw: Grid3<f64>,
}

/// Activation and score gradient at top-level layer `layer` for a single
/// `[1, C, D, H, W]` input, in inference mode.
pub fn layer_gradient<T: Real>(
    net: &Network<T>,
    input: &Tensor<T>,
    layer: usize,
    class_index: u8,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if class_index > 1 {
        return Err(Error::Parameter(format!("class index must be 0 or 1, got {}", class_index)));
    }
    if input.shape().first() != Some(&1) {
        return Err(Error::Geometry("attention maps take a single input".into()));
    }
    let (_, l) = net
        .layers()
        .get(layer)
        .ok_or_else(|| Error::Config(format!("no layer with index {}", layer)))?;
    if !l.is_volumetric() {
        return Err(Error::Config(format!(
            "layer `{}` does not produce a volumetric activation",
            net.layers()[layer].0
        )));
    }
    let pass = net.forward(input, Mode::Eval, Some(layer))?;
    let activation = pass.tapped.expect("tap requested");
    let n_out = pass.logits.len();
    let mut dout = Tensor::zeros(pass.logits.shape());
    dout.data_mut()[class_index as usize] = T::one();
    let score = pass.logits.data()[class_index as usize].as_f64();
    debug_assert_eq!(n_out, 2);
    let gradient = net
        .backward(&pass.tape, dout, GradTarget::Layer(layer), None)?
        .expect("layer gradient requested");
    Ok((score, activation, gradient))
}

/// Normalized Grad-CAM++ map on the input's spatial grid plus the trace.
pub fn gradcam_pp_network<T: Real>(
    net: &Network<T>,
    input: &Tensor<T>,
    layer: usize,
    class_index: u8,
) -> Result<(Grid3<f32>, GradCamTrace<T>)> {
    let (score, activation, gradient) = layer_gradient(net, input, layer, class_index)?;
    let raw = gradcam_pp_closed_form(&activation, &gradient)?;
    let s = input.shape();
    let raw32 = raw.map(|v| v as f32);
    let up = resize_trilinear(&raw32, [s[2], s[3], s[4]]);
    let map = normalize_map(&up.map(|v| v.max(0.0)));
    Ok((
        map,
        GradCamTrace {
            score,
            activation,
            gradient,
            raw,
        },
    ))
}

/// Attention map of `input` for `class_index` (or the predicted class).
pub fn gradcam_pp(
    classifier: &Classifier<f32>,
    input: &CompositeVolume,
    class_index: Option<u8>,
) -> Result<AttentionMap> {
    let x = classifier.input_tensor(input)?;
    let class_index = match class_index {
        Some(c) => c,
        None => classifier.predict_tensor(&x)?.predicted_class,
    };
    let layer = classifier.feature_layer_index()?;
    let (values, _) = gradcam_pp_network(classifier.network(), &x, layer, class_index)?;
    Ok(AttentionMap {
        values,
        class_index,
        layer_id: classifier.config().feature_layer.clone(),
        patient_id: input.provenance.patient_id.clone(),
    })
}

/// Voxelwise sum of already normalized maps, renormalized to [0, 1].
/// Each voxel's terms are added in sorted order, so the result does not
/// depend on the order of `maps`.
pub fn sum_attention_maps(maps: &[&Grid3<f32>], category: OutcomeCategory) -> Result<SummedAttentionMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Parameter(format!("no maps to sum for {}", category)))?;
    let dims = first.dims();
    if let Some(m) = maps.iter().find(|m| m.dims() != dims) {
        return Err(Error::Geometry(format!(
            "attention maps differ in shape: {:?} vs {:?}",
            dims,
            m.dims()
        )));
    }
    let mut terms = vec![0.0f32; maps.len()];
    let mut out = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        for (t, m) in terms.iter_mut().zip(maps) {
            *t = m.as_slice()[i];
        }
        terms.sort_by(f32::total_cmp);
        out.push(terms.iter().map(|&v| v as f64).sum::<f64>() as f32);
    }
    let summed = Grid3::from_vec(dims, out)?;
    Ok(SummedAttentionMap {
        values: normalize_map(&summed),
        category,
        n_contributors: maps.len(),
    })
}

/// `Σ map·mask / Σ map`, 0 for an all-zero map.
pub fn attention_mass_in_mask(map: &Grid3<f32>, mask: &Grid3<u8>) -> Result<f64> {
    if map.dims() != mask.dims() {
        return Err(Error::Geometry(format!(
            "map {:?} and mask {:?} differ in shape",
            map.dims(),
            mask.dims()
        )));
    }
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (&v, &m) in map.as_slice().iter().zip(mask.as_slice()) {
        total += v as f64;
        if m != 0 {
            inside += v as f64;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_gives_zero_map() {
        let a = Tensor::<f64>::from_vec(&[1, 2, 1, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let g = Tensor::zeros(&[1, 2, 1, 2, 2]);
        let raw = gradcam_pp_closed_form(&a, &g).unwrap();
        assert!(raw.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gradient_single_map() {
        // g ≡ 1: α = 1 / (2 + ΣA + ε), w = n·α > 0, so map ∝ relu(A)
        let vals = [-1.0, 0.5, 2.0, 3.0];
        let a = Tensor::<f64>::from_vec(&[1, 1, 1, 2, 2], vals.to_vec()).unwrap();
        let mut g = Tensor::zeros(&[1, 1, 1, 2, 2]);
        g.fill(1.0);
        let raw = gradcam_pp_closed_form(&a, &g).unwrap();
        let w = 4.0 / (2.0 + 4.5 + ALPHA_EPS);
        for (r, v) in raw.as_slice().iter().zip(vals) {
            assert!((r - w * f64::max(v, 0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_degenerate() {
        let z = Grid3::filled([1, 2, 2], 0.0f32);
        assert_eq!(normalize_map(&z), z);
        let c = Grid3::filled([1, 2, 2], 0.3f32);
        assert!(normalize_map(&c).as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mass_conventions() {
        let mask = Grid3::from_fn([1, 2, 2], |_, y, x| u8::from(y == 0 && x == 0));
        let uniform = Grid3::filled([1, 2, 2], 0.7f32);
        assert!((attention_mass_in_mask(&uniform, &mask).unwrap() - 0.25).abs() < 1e-12);
        let zero = Grid3::filled([1, 2, 2], 0.0f32);
        assert_eq!(attention_mass_in_mask(&zero, &mask).unwrap(), 0.0);
        let inside = mask.map(f32::from);
        assert_eq!(attention_mass_in_mask(&inside, &mask).unwrap(), 1.0);
    }

    #[test]
    fn sum_single_and_identical() {
        let m = Grid3::from_fn([2, 3, 3], |z, y, x| ((z + y + x) as f32) / 5.0);
        let one = sum_attention_maps(&[&m], OutcomeCategory::Tp).unwrap();
        let two = sum_attention_maps(&[&m, &m], OutcomeCategory::Tp).unwrap();
        for ((a, b), c) in one.values.as_slice().iter().zip(two.values.as_slice()).zip(m.as_slice()) {
            assert!((a - c).abs() < 1e-7);
            assert!((b - c).abs() < 1e-7);
        }
        assert_eq!(two.n_contributors, 2);
        assert!(sum_attention_maps(&[], OutcomeCategory::Tn).is_err());
    }
}
