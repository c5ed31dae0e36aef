//! Jet colormap, attention overlays, and side-by-side panels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::Grid3;

/// `(value, rgb)` anchors of the jet map.
pub const JET_ANCHORS: [(f64, [f64; 3]); 6] = [
    (0.0, [0.0, 0.0, 0.5]),
    (0.125, [0.0, 0.0, 1.0]),
    (0.375, [0.0, 1.0, 1.0]),
    (0.625, [1.0, 1.0, 0.0]),
    (0.875, [1.0, 0.0, 0.0]),
    (1.0, [0.5, 0.0, 0.0]),
];

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Piecewise-linear jet; inputs outside [0, 1] are clamped, NaN maps to 0.
pub fn jet_colormap(v: f64) -> [f64; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    for w in JET_ANCHORS.windows(2) {
        let (v0, c0) = w[0];
        let (v1, c1) = w[1];
        if v <= v1 {
            let t = (v - v0) / (v1 - v0);
            return [
                c0[0] + (c1[0] - c0[0]) * t,
                c0[1] + (c1[1] - c0[1]) * t,
                c0[2] + (c1[2] - c0[2]) * t,
            ];
        }
    }
    JET_ANCHORS[5].1
}

/// Row-major `H × W × 3` image with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![[0.0; 3]; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    /// 8-bit RGB bytes, each channel quantized as `round(255·c)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| libm::round(255.0 * c.clamp(0.0, 1.0)) as u8))
            .collect()
    }

    /// Places `other` to the right of `self`, separated by `gap` black
    /// columns.
    pub fn hconcat(&self, other: &RgbImage, gap: usize) -> Result<RgbImage> {
        if self.height != other.height {
            return Err(Error::Geometry(format!(
                "panel heights differ: {} vs {}",
                self.height, other.height
            )));
        }
        let mut out = RgbImage::new(self.height, self.width + gap + other.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, x));
            }
            for x in 0..other.width {
                out.set(y, self.width + gap + x, other.get(y, x));
            }
        }
        Ok(out)
    }
}

fn check_plane(name: &str, len: usize, height: usize, width: usize) -> Result<()> {
    if len != height * width {
        return Err(Error::Geometry(format!(
            "{} has {} values, expected {}×{}",
            name, len, height, width
        )));
    }
    Ok(())
}

/// `(1 − alpha)·gray(source) + alpha·jet(attention)` per pixel.
pub fn render_overlay(
    source: &[f32],
    attention: &[f32],
    height: usize,
    width: usize,
    alpha: f64,
) -> Result<RgbImage> {
    check_plane("source slice", source.len(), height, width)?;
    check_plane("attention slice", attention.len(), height, width)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must be in [0, 1], got {}", alpha)));
    }
    let pixels = source
        .iter()
        .zip(attention)
        .map(|(&s, &a)| {
            let g = if s.is_nan() { 0.0 } else { (s as f64).clamp(0.0, 1.0) };
            let j = jet_colormap(a as f64);
            j.map(|c| ((1.0 - alpha) * g + alpha * c).clamp(0.0, 1.0))
        })
        .collect();
    Ok(RgbImage {
        height,
        width,
        pixels,
    })
}

/// Grayscale slice with the boundary of `mask` drawn in white. A mask
/// voxel is on the boundary when one of its 4-neighbours is outside the
/// mask or the image.
pub fn render_with_contour(source: &[f32], mask: Option<&[u8]>, height: usize, width: usize) -> Result<RgbImage> {
    let mut img = render_overlay(source, &vec![0.0; source.len()], height, width, 0.0)?;
    if let Some(mask) = mask {
        check_plane("mask slice", mask.len(), height, width)?;
        let inside = |y: isize, x: isize| {
            y >= 0
                && x >= 0
                && (y as usize) < height
                && (x as usize) < width
                && mask[y as usize * width + x as usize] != 0
        };
        for y in 0..height as isize {
            for x in 0..width as isize {
                if inside(y, x)
                    && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .any(|(dy, dx)| !inside(y + dy, x + dx))
                {
                    img.set(y as usize, x as usize, [1.0; 3]);
                }
            }
        }
    }
    Ok(img)
}

/// Slice holding the global attention maximum (first one on ties), or the
/// middle slice when the map is all zero.
pub fn select_slice(map: &Grid3<f32>) -> usize {
    let [d, h, w] = map.dims();
    let mut best = (0usize, 0.0f32);
    for (i, &v) in map.as_slice().iter().enumerate() {
        if v > best.1 {
            best = (i / (h * w), v);
        }
    }
    if best.1 > 0.0 {
        best.0
    } else {
        d.saturating_sub(1) / 2
    }
}

/// Left: source slice with lesion contour; right: attention overlay.
pub fn patient_panel(
    source: &Grid3<f32>,
    map: &Grid3<f32>,
    lesion: Option<&Grid3<u8>>,
    slice: usize,
    alpha: f64,
) -> Result<RgbImage> {
    if source.dims() != map.dims() {
        return Err(Error::Geometry(format!(
            "source {:?} and attention {:?} differ in shape",
            source.dims(),
            map.dims()
        )));
    }
    let [d, h, w] = source.dims();
    if slice >= d {
        return Err(Error::Parameter(format!("slice {} out of range 0..{}", slice, d)));
    }
    if let Some(l) = lesion {
        if l.dims() != source.dims() {
            return Err(Error::Geometry(format!(
                "lesion mask {:?} does not match source {:?}",
                l.dims(),
                source.dims()
            )));
        }
    }
    let left = render_with_contour(source.slice(slice), lesion.map(|l| l.slice(slice)), h, w)?;
    let right = render_overlay(source.slice(slice), map.slice(slice), h, w, alpha)?;
    left.hconcat(&right, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn jet_anchor_values() {
        assert!(close(jet_colormap(0.0), [0.0, 0.0, 0.5]));
        assert!(close(jet_colormap(1.0), [0.5, 0.0, 0.0]));
        assert!(close(jet_colormap(0.5), [0.5, 1.0, 0.5]));
        assert!(close(jet_colormap(-3.0), jet_colormap(0.0)));
        assert!(close(jet_colormap(7.0), jet_colormap(1.0)));
    }

    #[test]
    fn overlay_extremes() {
        let s = [0.2f32, 0.9];
        let a = [0.0f32, 1.0];
        let gray = render_overlay(&s, &a, 1, 2, 0.0).unwrap();
        assert!(close(gray.get(0, 1), [0.9f32 as f64; 3]));
        let jet = render_overlay(&s, &a, 1, 2, 1.0).unwrap();
        assert!(close(jet.get(0, 1), [0.5, 0.0, 0.0]));
        let half = render_overlay(&[0.0; 4], &[0.0; 4], 2, 2, 0.5).unwrap();
        assert!(half.pixels.iter().all(|&p| close(p, [0.0, 0.0, 0.25])));
        assert!(render_overlay(&s, &a, 2, 2, 0.5).is_err());
    }

    #[test]
    fn slice_choice() {
        let mut m = Grid3::filled([10, 2, 2], 0.1f32);
        m.set(7, 1, 0, 1.0);
        assert_eq!(select_slice(&m), 7);
        assert_eq!(select_slice(&Grid3::filled([10, 2, 2], 0.0)), 4);
    }

    #[test]
    fn contour_is_white_border() {
        let mask: Vec<u8> = (0..25).map(|i| u8::from((1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)))).collect();
        let img = render_with_contour(&[0.0; 25], Some(&mask), 5, 5).unwrap();
        assert_eq!(img.get(1, 1), [1.0; 3]);
        assert_eq!(img.get(2, 2), [0.0; 3]);
        assert_eq!(img.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn quantization() {
        let img = RgbImage {
            height: 1,
            width: 1,
            pixels: vec![[0.0, 0.5, 1.0]],
        };
        assert_eq!(img.to_rgb8(), vec![0, 128, 255]);
    }
}
