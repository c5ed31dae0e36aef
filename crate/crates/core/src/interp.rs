//! Interpolation kernels shared by preprocessing and attention upsampling.

use alloc::vec::Vec;

use crate::volume::Grid3;

/// Source taps for resizing one axis from `n_in` to `n_out` samples with
/// half-pixel centers and edge clamping (`align_corners = false`).
/// Each entry is `(i0, i1, w1)`: value = `(1 - w1)·src[i0] + w1·src[i1]`.
pub fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Separable trilinear resize of a whole grid.
pub fn resize_trilinear(src: &Grid3<f32>, out: [usize; 3]) -> Grid3<f32> {
    let [d, h, w] = src.dims();
    let tz = axis_taps(d, out[0]);
    let ty = axis_taps(h, out[1]);
    let tx = axis_taps(w, out[2]);
    let s = src.as_slice();
    let at = |z: usize, y: usize, x: usize| s[(z * h + y) * w + x] as f64;
    Grid3::from_fn(out, |oz, oy, ox| {
        let (z0, z1, wz) = tz[oz];
        let (y0, y1, wy) = ty[oy];
        let (x0, x1, wx) = tx[ox];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), wx);
        let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), wx);
        let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), wx);
        let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), wx);
        lerp(lerp(c00, c01, wy), lerp(c10, c11, wy), wz) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_taps() {
        for (o, &(i0, _, w1)) in axis_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, o);
            assert!(w1.abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_two_to_four() {
        // half-pixel centers: outputs sit at source positions -0.25, 0.25, 0.75, 1.25
        let g = Grid3::from_vec([1, 1, 2], alloc::vec![0.0f32, 1.0]).unwrap();
        let r = resize_trilinear(&g, [1, 1, 4]);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in r.as_slice().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }
}
