//! Synthetic prostate phantoms.
//!
//! Each patient has an ellipsoidal prostate with a thin T2w-dark capsule,
//! surrounded by fat that holds one small lymph node (bright on DWI).
//! Positive patients also get an ellipsoidal lesion inside the prostate that
//! is bright on DWI and dark on ADC and T2w.
//!
//! The capsule, fat and node set every modality's intensity extremes in all
//! patients, so per-volume min-max scaling cannot turn the lesion into a
//! whole-image brightness cue. T2w is sampled on a grid twice as fine
//! in-plane as ADC and DWI, over the same field of view, so ingest has real
//! resampling to do. This is test fiction, not a tissue model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{
    Geometry, Grid3, MaskRole, MaskVolume, ModalityKind, ModalityVolume, IDENTITY_DIRECTION,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub positive_fraction: f64,
    /// T2w grid `[slices, height, width]`; ADC/DWI use half the in-plane size.
    pub grid: [usize; 3],
    /// Lesion radius range in mm.
    pub lesion_radius: [f64; 2],
    /// Noise standard deviation relative to each modality's gland intensity.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 24,
            positive_fraction: 0.5,
            grid: [16, 64, 64],
            lesion_radius: [5.0, 7.0],
            noise: 0.05,
            seed: 0,
        }
    }
}

/// In-plane T2w spacing; ADC and DWI are twice as coarse.
pub const T2W_SPACING: [f64; 3] = [3.0, 0.5, 0.5];
pub const DWI_SPACING: [f64; 3] = [3.0, 1.0, 1.0];
/// Extra low b-value DWI written alongside b800.
pub const LOW_B_VALUE: u32 = 50;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 2 {
            return Err(Error::Parameter("synthetic cohort needs at least 2 patients".into()));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "positive fraction must be in (0, 1), got {}",
                self.positive_fraction
            )));
        }
        let [d, h, w] = self.grid;
        if d < 4 || h < 16 || w < 16 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Parameter(format!(
                "grid {:?} too small (need >= 4 slices and even in-plane sizes >= 16)",
                self.grid
            )));
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0 > 0.0 && r1 >= r0 && r1.is_finite()) {
            return Err(Error::Parameter(format!("bad lesion radius range {:?}", self.lesion_radius)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Parameter(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        let n = libm::round(self.n_patients as f64 * self.positive_fraction) as usize;
        n.clamp(1, self.n_patients - 1)
    }

    pub fn t2w_geometry(&self) -> Geometry {
        Geometry {
            spacing: T2W_SPACING,
            origin: [0.0, 0.0, 0.0],
            direction: IDENTITY_DIRECTION,
        }
    }

    /// Same field of view as T2w: voxel edges coincide, centers shift by
    /// half the spacing difference.
    pub fn dwi_geometry(&self) -> Geometry {
        let shift = (DWI_SPACING[1] - T2W_SPACING[1]) / 2.0;
        Geometry {
            spacing: DWI_SPACING,
            origin: [shift, shift, 0.0],
            direction: IDENTITY_DIRECTION,
        }
    }

    pub fn dwi_dims(&self) -> [usize; 3] {
        let [d, h, w] = self.grid;
        [d, h / 2, w / 2]
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub label: u8,
    pub t2w: ModalityVolume,
    pub adc: ModalityVolume,
    pub dwi: ModalityVolume,
    pub dwi_low_b: ModalityVolume,
    pub prostate: MaskVolume,
    pub lesion: Option<MaskVolume>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    /// Physical center `[x, y, z]` in mm.
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| {
                let t = (p[i] - self.center[i]) / self.axes[i];
                t * t
            })
            .sum::<f64>()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.rho(p) <= 1.0
    }
}

struct Anatomy {
    body: Ellipsoid,
    prostate: Ellipsoid,
    node: Ellipsoid,
    lesion: Option<Ellipsoid>,
}

/// Normalized squared radius beyond which gland voxels belong to the capsule.
const CAPSULE_RHO: f64 = 0.8;

#[derive(Clone, Copy)]
enum Tissue {
    Air,
    Fat,
    Gland,
    Lesion,
    Capsule,
    Node,
}

impl Anatomy {
    fn tissue(&self, p: [f64; 3]) -> Tissue {
        let rho = self.prostate.rho(p);
        if rho <= 1.0 {
            if self.lesion.is_some_and(|l| l.contains(p)) {
                Tissue::Lesion
            } else if rho >= CAPSULE_RHO {
                Tissue::Capsule
            } else {
                Tissue::Gland
            }
        } else if self.node.contains(p) {
            Tissue::Node
        } else if self.body.contains(p) {
            Tissue::Fat
        } else {
            Tissue::Air
        }
    }
}

/// Intensities for air, fat, gland, lesion, capsule, node.
fn intensities(kind: ModalityKind) -> [f64; 6] {
    match kind {
        ModalityKind::T2w => [5.0, 600.0, 450.0, 250.0, 180.0, 350.0],
        ModalityKind::Adc => [0.0, 150.0, 1200.0, 600.0, 1200.0, 700.0],
        ModalityKind::Dwi { b_value } if b_value.get() < 400 => {
            [2.0, 150.0, 400.0, 450.0, 400.0, 430.0]
        }
        ModalityKind::Dwi { .. } => [1.0, 10.0, 70.0, 220.0, 70.0, 260.0],
    }
}

fn sample_anatomy(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, positive: bool) -> Anatomy {
    let [d, h, w] = spec.grid;
    // physical field of view (x, y, z) in mm, voxel edges at -spacing/2
    let fov = [
        w as f64 * T2W_SPACING[2],
        h as f64 * T2W_SPACING[1],
        d as f64 * T2W_SPACING[0],
    ];
    let mid = [
        fov[0] / 2.0 - T2W_SPACING[2] / 2.0,
        fov[1] / 2.0 - T2W_SPACING[1] / 2.0,
        fov[2] / 2.0 - T2W_SPACING[0] / 2.0,
    ];
    let body = Ellipsoid {
        center: mid,
        axes: [0.46 * fov[0], 0.40 * fov[1], 10.0 * fov[2]],
    };
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..=s);
    let base = [0.34 * fov[0], 0.30 * fov[1], 0.30 * fov[2]];
    let axes = [
        base[0] * (1.0 + jitter(rng, 0.12)),
        base[1] * (1.0 + jitter(rng, 0.12)),
        base[2] * (1.0 + jitter(rng, 0.12)),
    ];
    let center = [
        mid[0] + jitter(rng, 0.05 * fov[0]),
        mid[1] + jitter(rng, 0.05 * fov[1]),
        mid[2] + jitter(rng, 0.04 * fov[2]),
    ];
    let prostate = Ellipsoid { center, axes };
    // lymph node in the fat next to one corner of the gland's bounding
    // box, close enough to stay inside the prostate crop
    let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let node = Ellipsoid {
        center: [
            center[0] + sx * 0.92 * axes[0],
            center[1] + sy * 0.92 * axes[1],
            center[2] + jitter(rng, 0.2 * axes[2]),
        ],
        axes: [1.8, 1.8, 4.0],
    };
    let lesion = positive.then(|| inner_ellipsoid(rng, spec, &prostate));
    Anatomy {
        body,
        prostate,
        node,
        lesion,
    }
}

/// Random ellipsoid with a radius from `spec.lesion_radius`, placed inside
/// `outer`.
fn inner_ellipsoid(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, outer: &Ellipsoid) -> Ellipsoid {
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..=s);
    let (center, axes) = (outer.center, outer.axes);
    {
        let [r0, r1] = spec.lesion_radius;
        let min_axis = axes.iter().cloned().fold(f64::INFINITY, f64::min);
        let r = rng.random_range(r0..=r1).min(0.6 * min_axis);
        let laxes = [
            r * (1.0 + jitter(rng, 0.15)),
            r * (1.0 + jitter(rng, 0.15)),
            r.max(T2W_SPACING[0]) * (1.0 + jitter(rng, 0.15)),
        ];
        // a center at normalized radius ρ leaves at least (1 − ρ)·min_axis
        // of gland around it
        let lmax = laxes.iter().cloned().fold(0.0, f64::max);
        let reach = (1.0 - lmax / min_axis).max(0.0) * 0.9;
        let dir = loop {
            let u = [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ];
            let n2: f64 = u.iter().map(|v| v * v).sum();
            if n2 <= 1.0 {
                break u;
            }
        };
        Ellipsoid {
            center: [
                center[0] + dir[0] * reach * axes[0],
                center[1] + dir[1] * reach * axes[1],
                center[2] + dir[2] * reach * axes[2],
            ],
            axes: laxes,
        }
    }
}

/// Physical point `[x, y, z]` of a voxel center.
fn point(geom: &Geometry, z: usize, y: usize, x: usize) -> [f64; 3] {
    geom.index_to_physical(z as f64, y as f64, x as f64)
}

fn render_modality(
    anatomy: &Anatomy,
    kind: ModalityKind,
    dims: [usize; 3],
    geom: &Geometry,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModalityVolume> {
    let levels = intensities(kind);
    let sigma = noise * levels[2];
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let body = anatomy.body;
    let voxels = Grid3::from_fn(dims, |z, y, x| {
        let p = point(geom, z, y, x);
        let t = anatomy.tissue(p);
        let mut v = levels[t as usize];
        if matches!(t, Tissue::Fat) {
            // mild smooth shading so the background is not flat
            let s = libm::sin(p[0] / body.axes[0] * 2.0) * libm::cos(p[1] / body.axes[1] * 1.5);
            v *= 1.0 + 0.08 * s;
        }
        if sigma > 0.0 {
            v += normal.sample(rng);
        }
        v.max(0.0) as f32
    });
    ModalityVolume::new(voxels, *geom, kind)
}

/// Generates one patient deterministically from `(spec.seed, index)`.
pub fn generate_patient(spec: &SyntheticSpec, index: usize, positive: bool) -> Result<SyntheticPatient> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let anatomy = sample_anatomy(&mut rng, spec, positive);

    let tg = spec.t2w_geometry();
    let dg = spec.dwi_geometry();
    let t2w = render_modality(&anatomy, ModalityKind::T2w, spec.grid, &tg, spec.noise, &mut rng)?;
    let adc = render_modality(&anatomy, ModalityKind::Adc, spec.dwi_dims(), &dg, spec.noise, &mut rng)?;
    let dwi = render_modality(&anatomy, ModalityKind::DWI_B800, spec.dwi_dims(), &dg, spec.noise, &mut rng)?;
    let low = ModalityKind::dwi(LOW_B_VALUE)?;
    let dwi_low_b = render_modality(&anatomy, low, spec.dwi_dims(), &dg, spec.noise, &mut rng)?;

    let prostate = Grid3::from_fn(spec.grid, |z, y, x| {
        u8::from(anatomy.prostate.contains(point(&tg, z, y, x)))
    });
    let prostate = MaskVolume::new(prostate, tg, MaskRole::Prostate)?;
    let lesion = match anatomy.lesion {
        Some(l) => {
            let g = Grid3::from_fn(spec.grid, |z, y, x| {
                let p = point(&tg, z, y, x);
                u8::from(l.contains(p) && anatomy.prostate.contains(p))
            });
            Some(MaskVolume::new(g, tg, MaskRole::Lesion)?)
        }
        None => None,
    };
    Ok(SyntheticPatient {
        patient_id: format!("synth_{:03}", index),
        label: u8::from(positive),
        t2w,
        adc,
        dwi,
        dwi_low_b,
        prostate,
        lesion,
    })
}

/// Labels of the cohort: exactly `spec.n_positive()` ones, placed by a
/// seeded shuffle.
pub fn cohort_labels(spec: &SyntheticSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut labels: Vec<u8> = (0..spec.n_patients)
        .map(|i| u8::from(i < spec.n_positive()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);
    Ok(labels)
}

pub fn generate_cohort(spec: &SyntheticSpec) -> Result<Vec<SyntheticPatient>> {
    cohort_labels(spec)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| generate_patient(spec, i, l == 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_patients: 6,
            grid: [8, 32, 32],
            lesion_radius: [2.5, 3.5],
            ..Default::default()
        }
    }

    #[test]
    fn label_counts() {
        let spec = SyntheticSpec {
            n_patients: 10,
            seed: 1,
            ..Default::default()
        };
        let labels = cohort_labels(&spec).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 5);
    }

    #[test]
    fn lesion_inside_prostate() {
        for p in generate_cohort(&small()).unwrap() {
            match &p.lesion {
                Some(l) => {
                    assert_eq!(p.label, 1);
                    assert!(l.count_nonzero() > 0);
                    for (&a, &b) in l.voxels.as_slice().iter().zip(p.prostate.voxels.as_slice()) {
                        assert!(a <= b);
                    }
                }
                None => assert_eq!(p.label, 0),
            }
            assert!(p.prostate.count_nonzero() > 0);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_patient(&small(), 3, true).unwrap();
        let b = generate_patient(&small(), 3, true).unwrap();
        assert_eq!(a.t2w, b.t2w);
        assert_eq!(a.dwi, b.dwi);
    }

    #[test]
    fn shared_field_of_view() {
        let s = small();
        let t = s.t2w_geometry();
        let d = s.dwi_geometry();
        // first voxel edge of both grids at -0.25 mm in-plane
        let te = t.index_to_physical(0.0, -0.5, -0.5);
        let de = d.index_to_physical(0.0, -0.5, -0.5);
        assert!((te[0] - de[0]).abs() < 1e-12 && (te[1] - de[1]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SyntheticSpec {
            n_patients: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticSpec {
            positive_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
