use proptest::prelude::*;

use prostacam_core::gradcam::{normalize_map, sum_attention_maps};
use prostacam_core::metrics::{aggregate_metrics, categorize_outcome, confusion_matrix, OutcomeCategory};
use prostacam_core::nn::{cross_entropy_loss, softmax2, Prediction};
use prostacam_core::preprocess::{
    build_composite, mask_outside_prostate, normalize_intensity, preprocess_patient, prostate_box,
    standardize_slices, CropBox, LayoutMode, PatientVolumes, PreprocessParams, Provenance, SliceWindow,
};
use prostacam_core::render::{jet_colormap, render_overlay};
use prostacam_core::train::make_loocv_folds;
use prostacam_core::volume::IDENTITY_DIRECTION;
use prostacam_core::{Geometry, Grid3, MaskRole, MaskVolume, ModalityKind, ModalityVolume};

fn grid_strategy(max: [usize; 3]) -> impl Strategy<Value = Grid3<f32>> {
    (1..=max[0], 1..=max[1], 1..=max[2]).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(-1000.0f32..1000.0, d * h * w)
            .prop_map(move |v| Grid3::from_vec([d, h, w], v).unwrap())
    })
}

fn unit_geometry() -> Geometry {
    Geometry::new([3.0, 0.5, 0.5], [0.0; 3], IDENTITY_DIRECTION).unwrap()
}

fn volume(g: Grid3<f32>, m: ModalityKind) -> ModalityVolume {
    ModalityVolume::new(g, unit_geometry(), m).unwrap()
}

fn provenance(s: usize) -> Provenance {
    Provenance {
        patient_id: "p".into(),
        params: PreprocessParams::default(),
        dwi_b_value: 800,
        slice_window: SliceWindow::new(s, s, None).unwrap(),
        crop_box: CropBox { y0: 0, y1: 0, x0: 0, x1: 0 },
    }
}

/// Box-shaped prostate inside a `[d, h, w]` grid.
fn boxed_mask(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Grid3<u8> {
    Grid3::from_fn(dims, |z, y, x| {
        u8::from((lo[0]..=hi[0]).contains(&z) && (lo[1]..=hi[1]).contains(&y) && (lo[2]..=hi[2]).contains(&x))
    })
}

fn mask_strategy() -> impl Strategy<Value = Grid3<u8>> {
    (2usize..16, 4usize..24, 4usize..24)
        .prop_flat_map(|(d, h, w)| {
            let lo = (0..d, 0..h, 0..w);
            (Just([d, h, w]), lo)
        })
        .prop_flat_map(|(dims, (z0, y0, x0))| {
            let hi = (z0..dims[0], y0..dims[1], x0..dims[2]);
            (Just(dims), Just([z0, y0, x0]), hi)
        })
        .prop_map(|(dims, lo, (z1, y1, x1))| boxed_mask(dims, lo, [z1, y1, x1]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loocv_partitions(n in 2usize..=50) {
        let ids: Vec<usize> = (0..n).collect();
        let plan = make_loocv_folds(&ids).unwrap();
        prop_assert_eq!(plan.folds.len(), n);
        let mut seen = vec![0usize; n];
        for f in &plan.folds {
            prop_assert_eq!(f.train_ids.len(), n - 1);
            prop_assert!(!f.train_ids.contains(&f.val_id));
            seen[f.val_id] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn metrics_match_scalar_formulas(pairs in prop::collection::vec((0u8..2, 0u8..2), 0..300)) {
        let cm = confusion_matrix(pairs.iter().copied());
        let (mut tp, mut tn, mut fp, mut fneg) = (0.0f64, 0.0, 0.0, 0.0);
        for &(p, l) in &pairs {
            match (p, l) {
                (1, 1) => tp += 1.0,
                (0, 0) => tn += 1.0,
                (1, 0) => fp += 1.0,
                _ => fneg += 1.0,
            }
        }
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let m = aggregate_metrics(&cm);
        prop_assert!((m.accuracy - div(tp + tn, pairs.len() as f64)).abs() <= 1e-12);
        prop_assert!((m.sensitivity - div(tp, tp + fneg)).abs() <= 1e-12);
        prop_assert!((m.specificity - div(tn, tn + fp)).abs() <= 1e-12);
        prop_assert!((m.f1 - div(2.0 * tp, 2.0 * tp + fp + fneg)).abs() <= 1e-12);
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        for &(p, l) in &pairs {
            let c = categorize_outcome(p, l);
            prop_assert_eq!(c == OutcomeCategory::Tp || c == OutcomeCategory::Fp, p == 1);
        }
    }

    #[test]
    fn prediction_follows_logits(a in -50.0f64..50.0, b in -50.0f64..50.0, shift in -20.0f64..20.0) {
        let p = Prediction::from_logits([a, b]);
        prop_assert_eq!(p.predicted_class, u8::from(b > a));
        prop_assert!((p.probability_positive - softmax2([a, b])[1]).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&p.probability_positive));
        let tie = Prediction::from_logits([a, a]);
        prop_assert_eq!(tie.predicted_class, 0);
        for y in 0..2 {
            let l0 = cross_entropy_loss([a, b], y).unwrap();
            let l1 = cross_entropy_loss([a + shift, b + shift], y).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-6);
        }
    }

    #[test]
    fn jet_and_overlay_stay_in_range(
        v in prop::collection::vec(-2.0f32..3.0, 1..64),
        a in prop::collection::vec(-2.0f32..3.0, 1..64),
        alpha in 0.0f64..=1.0,
    ) {
        let n = v.len().min(a.len());
        for &x in &a {
            let c = jet_colormap(x as f64);
            prop_assert!(c.iter().all(|ch| (0.0..=1.0).contains(ch)));
        }
        let img = render_overlay(&v[..n], &a[..n], 1, n, alpha).unwrap();
        for px in &img.pixels {
            prop_assert!(px.iter().all(|ch| (0.0..=1.0).contains(ch)));
        }
    }

    #[test]
    fn summation_ignores_order(
        maps in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 24), 1..8),
        seed in any::<u64>(),
    ) {
        let grids: Vec<Grid3<f32>> = maps
            .into_iter()
            .map(|v| Grid3::from_vec([2, 3, 4], v).unwrap())
            .collect();
        let refs: Vec<&Grid3<f32>> = grids.iter().collect();
        let mut shuffled = refs.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = sum_attention_maps(&refs, OutcomeCategory::Tp).unwrap();
        let b = sum_attention_maps(&shuffled, OutcomeCategory::Tp).unwrap();
        let bits = |g: &Grid3<f32>| g.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.values), bits(&b.values));
        prop_assert_eq!(a.n_contributors, grids.len());
        prop_assert!(a.values.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalized_maps_span_unit_range(g in grid_strategy([4, 6, 6])) {
        let n = normalize_map(&g.map(|v| v.max(0.0)));
        prop_assert!(n.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let hi = n.as_slice().iter().cloned().fold(0.0f32, f32::max);
        prop_assert!(hi == 1.0 || n.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intensity_normalization_range(g in grid_strategy([6, 8, 8])) {
        let lo = g.as_slice().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = g.as_slice().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let n = normalize_intensity(&volume(g, ModalityKind::T2w));
        let nlo = n.voxels.as_slice().iter().cloned().fold(f32::INFINITY, f32::min);
        let nhi = n.voxels.as_slice().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            prop_assert!(nlo.abs() <= 1e-7 && (nhi - 1.0).abs() <= 1e-7);
        } else {
            prop_assert!(n.voxels.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masking_is_idempotent(mask in mask_strategy(), fill in -5.0f32..5.0) {
        let v = volume(Grid3::from_fn(mask.dims(), |z, y, x| fill + (z + y + x) as f32), ModalityKind::Adc);
        let m = MaskVolume::new(mask, unit_geometry(), MaskRole::Prostate).unwrap();
        let once = mask_outside_prostate(&v, &m).unwrap();
        let twice = mask_outside_prostate(&once, &m).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn crop_contains_mask(mask in mask_strategy(), margin in 0.0f64..0.5) {
        let b = prostate_box(&mask, margin).unwrap();
        let inside: usize = b.apply(&mask).as_slice().iter().map(|&v| v as usize).sum();
        let total: usize = mask.as_slice().iter().map(|&v| v as usize).sum();
        prop_assert_eq!(inside, total);
    }

    #[test]
    fn windowing_keeps_slice_totals(g in grid_strategy([30, 4, 4]), target in 1usize..20, c in 0.0f64..30.0) {
        let v = volume(g.clone(), ModalityKind::T2w);
        let center = Some(c.min((g.dims()[0] - 1) as f64));
        let s = standardize_slices(&v, target, center).unwrap();
        prop_assert_eq!(s.dims()[0], target);
        let w = SliceWindow::new(g.dims()[0], target, center).unwrap();
        for i in 0..w.count {
            let src: f64 = g.slice(w.src_start + i).iter().map(|&x| x as f64).sum();
            let dst: f64 = s.voxels.slice(w.dst_start + i).iter().map(|&x| x as f64).sum();
            prop_assert_eq!(src.to_bits(), dst.to_bits());
        }
        let padded = target - w.count;
        let zeros = (0..target)
            .filter(|&z| z < w.dst_start || z >= w.dst_start + w.count)
            .filter(|&z| s.voxels.slice(z).iter().all(|&x| x == 0.0))
            .count();
        prop_assert_eq!(zeros, padded);
    }

    #[test]
    fn interleave_round_trip(
        s in 1usize..6, h in 1usize..6, w in 1usize..6,
        seed in any::<u32>(),
    ) {
        let mk = |k: u32| Grid3::from_fn([s, h, w], |z, y, x| {
            let v = (z * 31 + y * 7 + x + k as usize * 101 + seed as usize) % 97;
            v as f32 / 96.0
        });
        let vols = [
            volume(mk(0), ModalityKind::T2w),
            volume(mk(1), ModalityKind::Adc),
            volume(mk(2), ModalityKind::DWI_B800),
        ];
        for layout in [LayoutMode::Interleaved, LayoutMode::Channels] {
            let c = build_composite(&vols[0], &vols[1], &vols[2], layout, provenance(s)).unwrap();
            let plane = h * w;
            for (m, v) in vols.iter().enumerate() {
                // independent deinterleave straight from the flat data
                let mut back = Vec::new();
                for z in 0..s {
                    let slot = match layout {
                        LayoutMode::Interleaved => 3 * z + m,
                        LayoutMode::Channels => m * s + z,
                    };
                    back.extend_from_slice(&c.data()[slot * plane..(slot + 1) * plane]);
                }
                prop_assert_eq!(back.as_slice(), v.voxels.as_slice());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pipeline_output_satisfies_composite_invariants(
        mask in mask_strategy(),
        target in 4usize..14,
        layout in prop_oneof![Just(LayoutMode::Interleaved), Just(LayoutMode::Channels)],
        masked in any::<bool>(),
        seed in any::<u16>(),
    ) {
        let dims = mask.dims();
        let noise = |k: usize| Grid3::from_fn(dims, |z, y, x| {
            (((z * 131 + y * 17 + x * 3 + k * 7 + seed as usize) % 53) as f32) * 4.0 - 60.0
        });
        let g = unit_geometry();
        let p = PatientVolumes {
            patient_id: "x".into(),
            t2w: ModalityVolume::new(noise(0), g, ModalityKind::T2w).unwrap(),
            adc: ModalityVolume::new(noise(1), g, ModalityKind::Adc).unwrap(),
            dwi: ModalityVolume::new(noise(2), g, ModalityKind::DWI_B800).unwrap(),
            prostate: MaskVolume::new(mask.clone(), g, MaskRole::Prostate).unwrap(),
            lesion: None,
        };
        let params = PreprocessParams {
            target_slices: target,
            layout,
            mask_outside_prostate: masked,
            ..Default::default()
        };
        let out = preprocess_patient(&p, &params).unwrap();
        let c = &out.composite;
        prop_assert_eq!(c.slices_per_modality(), target);
        let [ch, d, h, w] = c.shape();
        prop_assert_eq!(ch, layout.in_channels());
        prop_assert_eq!(ch * d, 3 * target);
        prop_assert_eq!([target, h, w], out.prostate.dims());
        prop_assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let window = c.provenance.slice_window;
        let kept: usize = window.apply(&mask).as_slice().iter().map(|&v| v as usize).sum();
        let cropped: usize = out.prostate.as_slice().iter().map(|&v| v as usize).sum();
        prop_assert_eq!(kept, cropped);
    }
}
