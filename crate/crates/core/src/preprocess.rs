//! Per-patient preprocessing: three modality volumes in, one standardized,
//! prostate-focused composite volume out.
//!
//! Order of operations in [`preprocess_patient`]: ADC and DWI (and any mask
//! not on the T2w grid) are resampled onto the T2w grid, every volume is
//! cut to a fixed slice window centered on the prostate, cropped to one
//! in-plane prostate box, optionally resized in-plane, min-max normalized,
//! optionally masked to the prostate, and finally stacked.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::interp::axis_taps;
use crate::nn::{Real, Tensor};
use crate::volume::{Geometry, Grid3, MaskRole, MaskVolume, ModalityKind, ModalityVolume};

pub const DEFAULT_TARGET_SLICES: usize = 12;
pub const DEFAULT_MARGIN_FRAC: f64 = 0.10;

/// How the three modalities are stacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LayoutMode {
    /// One channel, `3·S` slices ordered T2W₀, ADC₀, DWI₀, T2W₁, ...
    #[default]
    Interleaved,
    /// Three channels (T2W, ADC, DWI) of `S` slices each.
    Channels,
}

impl LayoutMode {
    pub fn in_channels(self) -> usize {
        match self {
            LayoutMode::Interleaved => 1,
            LayoutMode::Channels => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessParams {
    pub target_slices: usize,
    pub margin_frac: f64,
    pub layout: LayoutMode,
    /// Final in-plane size `[height, width]`; `None` keeps the crop size.
    pub in_plane_size: Option<[usize; 2]>,
    pub mask_outside_prostate: bool,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            target_slices: DEFAULT_TARGET_SLICES,
            margin_frac: DEFAULT_MARGIN_FRAC,
            layout: LayoutMode::Interleaved,
            in_plane_size: None,
            mask_outside_prostate: false,
        }
    }
}

/// Everything needed to reproduce a composite from its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub patient_id: String,
    pub params: PreprocessParams,
    pub dwi_b_value: u32,
    pub slice_window: SliceWindow,
    pub crop_box: CropBox,
}

// ---------------------------------------------------------------- resampling

fn trilinear_at(src: &Grid3<f32>, idx: [f64; 3]) -> f32 {
    const TOL: f64 = 1e-6;
    let dims = src.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let n = dims[a] as f64;
        let v = idx[a];
        if !(v >= -TOL && v <= n - 1.0 + TOL) {
            return 0.0;
        }
        let v = v.clamp(0.0, n - 1.0);
        let f = libm::floor(v);
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = v - f;
    }
    let g = |z: usize, y: usize, x: usize| src.get(z, y, x) as f64;
    let lerp = |a: f64, b: f64, w: f64| a + (b - a) * w;
    let c00 = lerp(g(lo[0], lo[1], lo[2]), g(lo[0], lo[1], hi[2]), t[2]);
    let c01 = lerp(g(lo[0], hi[1], lo[2]), g(lo[0], hi[1], hi[2]), t[2]);
    let c10 = lerp(g(hi[0], lo[1], lo[2]), g(hi[0], lo[1], hi[2]), t[2]);
    let c11 = lerp(g(hi[0], hi[1], lo[2]), g(hi[0], hi[1], hi[2]), t[2]);
    lerp(lerp(c00, c01, t[1]), lerp(c10, c11, t[1]), t[0]) as f32
}

/// Trilinear resampling in physical space; samples outside the source grid
/// are 0.
pub fn resample_values(
    src: &Grid3<f32>,
    src_geom: &Geometry,
    dims: [usize; 3],
    geom: &Geometry,
) -> Result<Grid3<f32>> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Geometry(format!(
            "degenerate reference grid {:?}",
            dims
        )));
    }
    geom.validate()?;
    src_geom.validate()?;
    if src.dims() == dims && src_geom.approx_eq(geom, 1e-9) {
        return Ok(src.clone());
    }
    Ok(Grid3::from_fn(dims, |z, y, x| {
        let p = geom.index_to_physical(z as f64, y as f64, x as f64);
        trilinear_at(src, src_geom.physical_to_index(p))
    }))
}

pub fn resample_to_grid(vol: &ModalityVolume, reference: &ModalityVolume) -> Result<ModalityVolume> {
    let voxels = resample_values(&vol.voxels, &vol.geometry, reference.dims(), &reference.geometry)?;
    Ok(ModalityVolume {
        voxels,
        geometry: reference.geometry,
        modality: vol.modality,
    })
}

/// Mask resampling: trilinear on {0, 1}, then thresholded at 0.5.
pub fn resample_mask(mask: &MaskVolume, dims: [usize; 3], geom: &Geometry) -> Result<MaskVolume> {
    let values = mask.voxels.map(f32::from);
    let r = resample_values(&values, &mask.geometry, dims, geom)?;
    Ok(MaskVolume {
        voxels: r.map(|v| u8::from(v >= 0.5)),
        geometry: *geom,
        role: mask.role,
    })
}

// ----------------------------------------------------- slice standardization

/// Mapping from source slices to a fixed-size output stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceWindow {
    /// First source slice copied.
    pub src_start: usize,
    /// Number of slices copied.
    pub count: usize,
    /// Output slice receiving `src_start`; slices before it are zero.
    pub dst_start: usize,
    pub target: usize,
}

impl SliceWindow {
    /// A window of `target` slices over `n` source slices. With more source
    /// slices than needed the window is centered on `center` (rounded half
    /// up, clamped into the volume; default: the volume center). With fewer,
    /// zero slices pad both ends and the odd one goes after the data.
    pub fn new(n: usize, target: usize, center: Option<f64>) -> Result<Self> {
        if target == 0 {
            return Err(Error::Parameter("target slice count must be positive".into()));
        }
        if n == 0 {
            return Err(Error::Geometry("volume has no slices".into()));
        }
        if n >= target {
            let c = center.unwrap_or((n as f64 - 1.0) / 2.0);
            let c = libm::floor(c + 0.5) as isize;
            let start = (c - (target / 2) as isize).clamp(0, (n - target) as isize) as usize;
            Ok(Self {
                src_start: start,
                count: target,
                dst_start: 0,
                target,
            })
        } else {
            Ok(Self {
                src_start: 0,
                count: n,
                dst_start: (target - n) / 2,
                target,
            })
        }
    }

    pub fn apply<T: Copy + Default>(&self, grid: &Grid3<T>) -> Grid3<T> {
        let [_, h, w] = grid.dims();
        let mut out = Grid3::filled([self.target, h, w], T::default());
        let plane = h * w;
        for i in 0..self.count {
            let src = grid.slice(self.src_start + i);
            let z = self.dst_start + i;
            out.as_mut_slice()[z * plane..(z + 1) * plane].copy_from_slice(src);
        }
        out
    }

    pub fn geometry(&self, geom: &Geometry) -> Geometry {
        let shift = self.src_start as f64 - self.dst_start as f64;
        Geometry {
            origin: geom.index_to_physical(shift, 0.0, 0.0),
            ..*geom
        }
    }
}

/// Mean slice index of the nonzero voxels, `None` for an empty mask.
pub fn mask_slice_centroid(mask: &Grid3<u8>) -> Option<f64> {
    let [d, h, w] = mask.dims();
    let plane = h * w;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for z in 0..d {
        let c = mask.as_slice()[z * plane..(z + 1) * plane]
            .iter()
            .filter(|&&v| v != 0)
            .count();
        sum += (z * c) as f64;
        count += c;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Cuts or pads `vol` to `target` slices around `center` (see
/// [`SliceWindow::new`]). In-plane size is untouched.
pub fn standardize_slices(vol: &ModalityVolume, target: usize, center: Option<f64>) -> Result<ModalityVolume> {
    let window = SliceWindow::new(vol.dims()[0], target, center)?;
    Ok(ModalityVolume {
        voxels: window.apply(&vol.voxels),
        geometry: window.geometry(&vol.geometry),
        modality: vol.modality,
    })
}

// ------------------------------------------------------------------ cropping

/// Inclusive in-plane box `[y0, y1] × [x0, x1]`, applied to every slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn apply<T: Copy>(&self, grid: &Grid3<T>) -> Grid3<T> {
        Grid3::from_fn([grid.dims()[0], self.height(), self.width()], |z, y, x| {
            grid.get(z, y + self.y0, x + self.x0)
        })
    }

    pub fn geometry(&self, geom: &Geometry) -> Geometry {
        Geometry {
            origin: geom.index_to_physical(0.0, self.y0 as f64, self.x0 as f64),
            ..*geom
        }
    }
}

/// Bounding box of the mask's nonzero voxels over all slices, grown by
/// `ceil(margin_frac · side)` per side and clamped to the image.
pub fn prostate_box(mask: &Grid3<u8>, margin_frac: f64) -> Result<CropBox> {
    if !(margin_frac >= 0.0 && margin_frac.is_finite()) {
        return Err(Error::Parameter(format!(
            "margin fraction must be >= 0, got {}",
            margin_frac
        )));
    }
    let [d, h, w] = mask.dims();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) != 0 {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::EmptyProstateMask);
    }
    // the small offset keeps products like 0.1 · 30 from rounding up a whole voxel
    let grow = |side: usize| libm::ceil(margin_frac * side as f64 - 1e-9).max(0.0) as usize;
    let my = grow(y1 - y0 + 1);
    let mx = grow(x1 - x0 + 1);
    Ok(CropBox {
        y0: y0.saturating_sub(my),
        y1: (y1 + my).min(h - 1),
        x0: x0.saturating_sub(mx),
        x1: (x1 + mx).min(w - 1),
    })
}

pub fn crop_to_prostate(vol: &ModalityVolume, mask: &MaskVolume, margin_frac: f64) -> Result<ModalityVolume> {
    same_dims(vol.dims(), mask.dims())?;
    let b = prostate_box(&mask.voxels, margin_frac)?;
    Ok(ModalityVolume {
        voxels: b.apply(&vol.voxels),
        geometry: b.geometry(&vol.geometry),
        modality: vol.modality,
    })
}

fn same_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::Geometry(format!(
            "grid mismatch: volume {:?} vs mask {:?}",
            a, b
        )));
    }
    Ok(())
}

// ----------------------------------------------------------- intensity ops

pub fn mask_outside_prostate(vol: &ModalityVolume, mask: &MaskVolume) -> Result<ModalityVolume> {
    same_dims(vol.dims(), mask.dims())?;
    let mut out = vol.clone();
    out.voxels
        .as_mut_slice()
        .iter_mut()
        .zip(mask.voxels.as_slice())
        .for_each(|(v, &m)| {
            if m == 0 {
                *v = 0.0
            }
        });
    Ok(out)
}

/// Per-volume min-max scaling to [0, 1]; constant volumes become all zero.
pub fn normalize_intensity(vol: &ModalityVolume) -> ModalityVolume {
    let (lo, hi) = vol
        .voxels
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let range = hi - lo;
    let voxels = if range > 0.0 {
        vol.voxels
            .map(|v| (((v as f64 - lo) / range) as f32).clamp(0.0, 1.0))
    } else {
        vol.voxels.map(|_| 0.0)
    };
    ModalityVolume {
        voxels,
        geometry: vol.geometry,
        modality: vol.modality,
    }
}

/// Bilinear in-plane resize with half-pixel centers and edge clamping;
/// slices are untouched. Spacing grows so the physical extent is kept.
pub fn resize_in_plane(vol: &ModalityVolume, size: [usize; 2]) -> Result<ModalityVolume> {
    let [d, h, w] = vol.dims();
    let voxels = resize_plane_values(&vol.voxels, size)?;
    let g = &vol.geometry;
    let sy = h as f64 / size[0] as f64;
    let sx = w as f64 / size[1] as f64;
    let geometry = Geometry {
        spacing: [g.spacing[0], g.spacing[1] * sy, g.spacing[2] * sx],
        origin: g.index_to_physical(0.0, (sy - 1.0) / 2.0, (sx - 1.0) / 2.0),
        direction: g.direction,
    };
    debug_assert_eq!(voxels.dims()[0], d);
    Ok(ModalityVolume {
        voxels,
        geometry,
        modality: vol.modality,
    })
}

fn resize_plane_values(src: &Grid3<f32>, size: [usize; 2]) -> Result<Grid3<f32>> {
    if size[0] == 0 || size[1] == 0 {
        return Err(Error::Parameter("in-plane size must be positive".into()));
    }
    let [d, h, w] = src.dims();
    if [h, w] == size {
        return Ok(src.clone());
    }
    let ty = axis_taps(h, size[0]);
    let tx = axis_taps(w, size[1]);
    Ok(Grid3::from_fn([d, size[0], size[1]], |z, y, x| {
        let (y0, y1, wy) = ty[y];
        let (x0, x1, wx) = tx[x];
        let g = |yy: usize, xx: usize| src.get(z, yy, xx) as f64;
        let top = g(y0, x0) + (g(y0, x1) - g(y0, x0)) * wx;
        let bottom = g(y1, x0) + (g(y1, x1) - g(y1, x0)) * wx;
        (top + (bottom - top) * wy) as f32
    }))
}

pub fn resize_mask_in_plane(mask: &Grid3<u8>, size: [usize; 2]) -> Result<Grid3<u8>> {
    Ok(resize_plane_values(&mask.map(f32::from), size)?.map(|v| u8::from(v >= 0.5)))
}

// ----------------------------------------------------------------- composite

/// Fused three-modality network input.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeVolume {
    layout: LayoutMode,
    slices_per_modality: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub provenance: Provenance,
}

impl CompositeVolume {
    /// Reassembles a composite from its stored `[channels, depth, H, W]`
    /// data (as written by [`CompositeVolume::data`]).
    pub fn from_parts(
        layout: LayoutMode,
        slices_per_modality: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        if data.len() != 3 * slices_per_modality * height * width {
            return Err(Error::Geometry(format!(
                "composite of 3×{}×{}×{} needs {} values, got {}",
                slices_per_modality,
                height,
                width,
                3 * slices_per_modality * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("composite intensities must lie in [0, 1]".into()));
        }
        Ok(Self {
            layout,
            slices_per_modality,
            height,
            width,
            data,
            provenance,
        })
    }

    pub fn layout(&self) -> LayoutMode {
        self.layout
    }

    pub fn channels(&self) -> usize {
        self.layout.in_channels()
    }

    pub fn slices_per_modality(&self) -> usize {
        self.slices_per_modality
    }

    /// Network-facing `[depth, height, width]`.
    pub fn spatial_dims(&self) -> [usize; 3] {
        match self.layout {
            LayoutMode::Interleaved => [3 * self.slices_per_modality, self.height, self.width],
            LayoutMode::Channels => [self.slices_per_modality, self.height, self.width],
        }
    }

    /// `[channels, depth, height, width]`.
    pub fn shape(&self) -> [usize; 4] {
        let [d, h, w] = self.spatial_dims();
        [self.channels(), d, h, w]
    }

    /// Row-major values in [`CompositeVolume::shape`] order.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Storage offset of slice `z` of modality channel `m`.
    fn slice_offset(&self, m: usize, z: usize) -> usize {
        let s = match self.layout {
            LayoutMode::Interleaved => 3 * z + m,
            LayoutMode::Channels => m * self.slices_per_modality + z,
        };
        s * self.plane()
    }

    pub fn modality_slice(&self, m: usize, z: usize) -> &[f32] {
        let o = self.slice_offset(m, z);
        &self.data[o..o + self.plane()]
    }

    /// The `S × H × W` volume of one modality channel (0 = T2w, 1 = ADC,
    /// 2 = DWI).
    pub fn modality_volume(&self, m: usize) -> Grid3<f32> {
        let mut data = Vec::with_capacity(self.slices_per_modality * self.plane());
        for z in 0..self.slices_per_modality {
            data.extend_from_slice(self.modality_slice(m, z));
        }
        Grid3::from_vec([self.slices_per_modality, self.height, self.width], data)
            .expect("consistent dims")
    }

    /// `[1, C, D, H, W]` network input.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let [c, d, h, w] = self.shape();
        Tensor::from_vec(
            &[1, c, d, h, w],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    /// Lifts a per-modality (`S × H × W`) grid to the network's spatial
    /// grid; interleaved layouts repeat each slice for the three modalities.
    pub fn expand_to_spatial<T: Copy>(&self, grid: &Grid3<T>) -> Result<Grid3<T>> {
        let [s, h, w] = grid.dims();
        if [s, h, w] != [self.slices_per_modality, self.height, self.width] {
            return Err(Error::Geometry(format!(
                "expected a {}×{}×{} grid, got {:?}",
                self.slices_per_modality,
                self.height,
                self.width,
                grid.dims()
            )));
        }
        Ok(match self.layout {
            LayoutMode::Channels => grid.clone(),
            LayoutMode::Interleaved => {
                Grid3::from_fn(self.spatial_dims(), |z, y, x| grid.get(z / 3, y, x))
            }
        })
    }

    /// Restricts a network-spatial grid to the slices of one modality.
    pub fn modality_part<T: Copy>(&self, grid: &Grid3<T>, m: usize) -> Result<Grid3<T>> {
        if grid.dims() != self.spatial_dims() {
            return Err(Error::Geometry(format!(
                "expected {:?}, got {:?}",
                self.spatial_dims(),
                grid.dims()
            )));
        }
        Ok(match self.layout {
            LayoutMode::Channels => grid.clone(),
            LayoutMode::Interleaved => Grid3::from_fn(
                [self.slices_per_modality, self.height, self.width],
                |z, y, x| grid.get(3 * z + m, y, x),
            ),
        })
    }
}

/// Stacks three preprocessed modalities in canonical order.
pub fn build_composite(
    t2w: &ModalityVolume,
    adc: &ModalityVolume,
    dwi: &ModalityVolume,
    layout: LayoutMode,
    provenance: Provenance,
) -> Result<CompositeVolume> {
    let vols = [t2w, adc, dwi];
    if t2w.dims() != adc.dims() || t2w.dims() != dwi.dims() {
        return Err(Error::Geometry(format!(
            "modality shapes differ: T2W {:?}, ADC {:?}, DWI {:?}",
            t2w.dims(),
            adc.dims(),
            dwi.dims()
        )));
    }
    for (m, v) in vols.iter().enumerate() {
        if v.modality.channel() != m {
            return Err(Error::Parameter(format!(
                "expected modality order T2W, ADC, DWI; got {} in position {}",
                v.modality, m
            )));
        }
    }
    let [s, h, w] = t2w.dims();
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * s * plane);
    match layout {
        LayoutMode::Interleaved => {
            for z in 0..s {
                for v in &vols {
                    data.extend_from_slice(v.voxels.slice(z));
                }
            }
        }
        LayoutMode::Channels => {
            for v in &vols {
                data.extend_from_slice(v.voxels.as_slice());
            }
        }
    }
    CompositeVolume::from_parts(layout, s, h, w, data, provenance)
}

// --------------------------------------------------------------- pipeline

/// Raw per-patient inputs.
#[derive(Debug, Clone)]
pub struct PatientVolumes {
    pub patient_id: String,
    pub t2w: ModalityVolume,
    pub adc: ModalityVolume,
    pub dwi: ModalityVolume,
    pub prostate: MaskVolume,
    pub lesion: Option<MaskVolume>,
}

/// Composite plus masks on the per-modality `S × H × W` grid.
#[derive(Debug, Clone)]
pub struct PreprocessedPatient {
    pub composite: CompositeVolume,
    pub geometry: Geometry,
    pub prostate: Grid3<u8>,
    pub lesion: Option<Grid3<u8>>,
}

fn mask_on(mask: &MaskVolume, reference: &ModalityVolume) -> Result<MaskVolume> {
    if mask.dims() == reference.dims() && mask.geometry.approx_eq(&reference.geometry, 1e-4) {
        Ok(mask.clone())
    } else {
        resample_mask(mask, reference.dims(), &reference.geometry)
    }
}

pub fn preprocess_patient(p: &PatientVolumes, params: &PreprocessParams) -> Result<PreprocessedPatient> {
    if p.t2w.modality != ModalityKind::T2w || p.adc.modality != ModalityKind::Adc {
        return Err(Error::Parameter("expected T2W and ADC inputs".into()));
    }
    let dwi_b_value = p
        .dwi
        .modality
        .b_value()
        .ok_or_else(|| Error::Parameter("expected a DWI input".into()))?;
    if p.prostate.role != MaskRole::Prostate {
        return Err(Error::Parameter("expected a prostate mask".into()));
    }
    let reference = &p.t2w;
    let adc = resample_to_grid(&p.adc, reference)?;
    let dwi = resample_to_grid(&p.dwi, reference)?;
    let prostate = mask_on(&p.prostate, reference)?;
    let lesion = p.lesion.as_ref().map(|m| mask_on(m, reference)).transpose()?;

    let center = mask_slice_centroid(&prostate.voxels).ok_or(Error::EmptyProstateMask)?;
    let window = SliceWindow::new(reference.dims()[0], params.target_slices, Some(center))?;
    let prostate_w = window.apply(&prostate.voxels);
    let crop = prostate_box(&prostate_w, params.margin_frac)?;
    let geometry = crop.geometry(&window.geometry(&reference.geometry));

    let mut prostate_c = crop.apply(&prostate_w);
    let mut lesion_c = lesion.map(|l| crop.apply(&window.apply(&l.voxels)));
    let mut vols: Vec<ModalityVolume> = [reference, &adc, &dwi]
        .iter()
        .map(|v| ModalityVolume {
            voxels: crop.apply(&window.apply(&v.voxels)),
            geometry,
            modality: v.modality,
        })
        .collect();
    let mut geometry = geometry;
    if let Some(size) = params.in_plane_size {
        for v in vols.iter_mut() {
            *v = resize_in_plane(v, size)?;
        }
        geometry = vols[0].geometry;
        prostate_c = resize_mask_in_plane(&prostate_c, size)?;
        lesion_c = lesion_c.map(|l| resize_mask_in_plane(&l, size)).transpose()?;
    }
    for v in vols.iter_mut() {
        *v = normalize_intensity(v);
        if params.mask_outside_prostate {
            let m = MaskVolume {
                voxels: prostate_c.clone(),
                geometry,
                role: MaskRole::Prostate,
            };
            *v = mask_outside_prostate(v, &m)?;
        }
    }
    let provenance = Provenance {
        patient_id: p.patient_id.clone(),
        params: params.clone(),
        dwi_b_value,
        slice_window: window,
        crop_box: crop,
    };
    let composite = build_composite(&vols[0], &vols[1], &vols[2], params.layout, provenance)?;
    Ok(PreprocessedPatient {
        composite,
        geometry,
        prostate: prostate_c,
        lesion: lesion_c,
    })
}
