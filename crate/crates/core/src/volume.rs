//! Volumetric containers and their physical geometry.
//!
//! Grids are stored slice-major: `(slices, height, width)` with the width
//! index varying fastest, which is also the on-disk order of NIfTI and
//! MetaImage data. Physical coordinates follow the LPS convention used by
//! ITK; readers of RAS-based formats convert on load.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::num::NonZeroU32;

use crate::error::{Error, Result};

/// A dense 3D grid, `dims = [slices, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Geometry(format!(
                "grid {:?} needs {} voxels, got {}",
                dims,
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Voxels of slice `z`, row-major `height × width`.
    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.dims[1] * self.dims[2];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

/// Index-to-physical mapping of a grid.
///
/// `spacing` is in grid-axis order `[dz, dy, dx]` (mm). `origin` is the
/// physical position (x, y, z) of voxel `(0, 0, 0)`. `direction` follows the
/// ITK convention: column `c` is the unit vector of index axis `c` where the
/// index axes are ordered `(x = column, y = row, z = slice)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: [[f64; 3]; 3],
}

pub const IDENTITY_DIRECTION: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for Geometry {
    fn default() -> Self {
        Self {
            spacing: [1.0; 3],
            origin: [0.0; 3],
            direction: IDENTITY_DIRECTION,
        }
    }
}

impl Geometry {
    pub fn new(spacing: [f64; 3], origin: [f64; 3], direction: [[f64; 3]; 3]) -> Result<Self> {
        let g = Self {
            spacing,
            origin,
            direction,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        let d = &self.direction;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|r| d[r][a] * d[r][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if !((dot - want).abs() <= 1e-6) {
                    return Err(Error::Geometry(format!(
                        "direction is not orthonormal: {:?}",
                        self.direction
                    )));
                }
            }
        }
        Ok(())
    }

    /// Physical point of continuous grid index `(z, y, x)`.
    pub fn index_to_physical(&self, z: f64, y: f64, x: f64) -> [f64; 3] {
        let scaled = [x * self.spacing[2], y * self.spacing[1], z * self.spacing[0]];
        let mut p = self.origin;
        for (r, pr) in p.iter_mut().enumerate() {
            for (c, s) in scaled.iter().enumerate() {
                *pr += self.direction[r][c] * s;
            }
        }
        p
    }

    /// Continuous grid index `[z, y, x]` of a physical point.
    pub fn physical_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        let rel = [
            p[0] - self.origin[0],
            p[1] - self.origin[1],
            p[2] - self.origin[2],
        ];
        // direction is orthonormal, so its inverse is the transpose
        let mut ijk = [0.0; 3];
        for (c, v) in ijk.iter_mut().enumerate() {
            *v = (0..3).map(|r| self.direction[r][c] * rel[r]).sum();
        }
        [
            ijk[2] / self.spacing[0],
            ijk[1] / self.spacing[1],
            ijk[0] / self.spacing[2],
        ]
    }

    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
        close(&self.spacing, &other.spacing)
            && close(&self.origin, &other.origin)
            && (0..3).all(|r| close(&self.direction[r], &other.direction[r]))
    }
}

/// MRI sequence of a volume. DWI carries its b-value (s/mm²).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityKind {
    T2w,
    Adc,
    Dwi { b_value: NonZeroU32 },
}

impl ModalityKind {
    pub const DWI_B800: ModalityKind = ModalityKind::Dwi {
        b_value: match NonZeroU32::new(800) {
            Some(b) => b,
            None => unreachable!(),
        },
    };

    pub fn dwi(b_value: u32) -> Result<Self> {
        NonZeroU32::new(b_value)
            .map(|b_value| ModalityKind::Dwi { b_value })
            .ok_or_else(|| Error::Parameter("DWI b-value must be positive".into()))
    }

    pub fn b_value(&self) -> Option<u32> {
        match self {
            ModalityKind::Dwi { b_value } => Some(b_value.get()),
            _ => None,
        }
    }

    /// Channel position in the canonical composite order (T2w, ADC, DWI).
    pub fn channel(&self) -> usize {
        match self {
            ModalityKind::T2w => 0,
            ModalityKind::Adc => 1,
            ModalityKind::Dwi { .. } => 2,
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalityKind::T2w => f.write_str("T2W"),
            ModalityKind::Adc => f.write_str("ADC"),
            ModalityKind::Dwi { b_value } => write!(f, "DWI(b={})", b_value),
        }
    }
}

/// One MRI modality on its acquisition grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityVolume {
    pub voxels: Grid3<f32>,
    pub geometry: Geometry,
    pub modality: ModalityKind,
}

impl ModalityVolume {
    pub fn new(voxels: Grid3<f32>, geometry: Geometry, modality: ModalityKind) -> Result<Self> {
        if voxels.dims().iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!(
                "volume dimensions must be >= 1, got {:?}",
                voxels.dims()
            )));
        }
        geometry.validate()?;
        Ok(Self {
            voxels,
            geometry,
            modality,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskRole {
    Prostate,
    Lesion,
}

/// Binary segmentation; every voxel is 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub voxels: Grid3<u8>,
    pub geometry: Geometry,
    pub role: MaskRole,
}

impl MaskVolume {
    pub fn new(voxels: Grid3<u8>, geometry: Geometry, role: MaskRole) -> Result<Self> {
        if voxels.as_slice().iter().any(|&v| v > 1) {
            return Err(Error::Data("mask voxels must be 0 or 1".into()));
        }
        geometry.validate()?;
        Ok(Self {
            voxels,
            geometry,
            role,
        })
    }

    /// Binarize an arbitrary label volume: any nonzero voxel becomes 1.
    pub fn from_labels(labels: &Grid3<f32>, geometry: Geometry, role: MaskRole) -> Result<Self> {
        Self::new(labels.map(|v| u8::from(v != 0.0)), geometry, role)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims()
    }

    pub fn count_nonzero(&self) -> usize {
        self.voxels.as_slice().iter().filter(|&&v| v != 0).count()
    }
}
