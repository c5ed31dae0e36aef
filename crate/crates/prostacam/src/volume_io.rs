//! Volume files: NIfTI-1 (`.nii`, `.nii.gz`) and MetaImage (`.mha`).
//!
//! In memory, physical coordinates are LPS (the ITK convention). NIfTI
//! affines are RAS, so x and y flip sign on the way in and out. MetaImage
//! headers are already LPS.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;
use nalgebra::Matrix4;
use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions, XForm};

use prostacam_core::{Geometry, Grid3, MaskRole, MaskVolume, ModalityKind, ModalityVolume};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    MetaImage,
}

impl VolumeFormat {
    pub fn of(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".nii.gz") || name.ends_with(".nii") {
            Some(VolumeFormat::Nifti)
        } else if name.ends_with(".mha") {
            Some(VolumeFormat::MetaImage)
        } else {
            None
        }
    }
}

/// Voxel grid plus geometry, before any modality or mask semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub values: Grid3<f32>,
    pub geometry: Geometry,
}

/// Reads any supported file.
pub fn read_volume(path: &Path) -> Result<RawVolume> {
    let raw = match VolumeFormat::of(path) {
        Some(VolumeFormat::Nifti) => read_nifti(path)?,
        Some(VolumeFormat::MetaImage) => read_mha(path)?,
        None => {
            return Err(PipelineError::format(
                path,
                "unsupported volume format (expected .nii, .nii.gz or .mha)",
            ))
        }
    };
    raw.geometry
        .validate()
        .map_err(|e| PipelineError::data(path, e))?;
    Ok(raw)
}

/// Reads a modality volume; NaN or infinite voxels are a data error.
pub fn load_volume(path: &Path, expected: ModalityKind) -> Result<ModalityVolume> {
    let raw = read_volume(path)?;
    if let Some(i) = raw.values.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(PipelineError::data(
            path,
            prostacam_core::Error::Data(format!("non-finite voxel at flat index {}", i)),
        ));
    }
    ModalityVolume::new(raw.values, raw.geometry, expected).map_err(|e| PipelineError::data(path, e))
}

/// Reads a mask; any nonzero voxel is foreground.
pub fn load_mask(path: &Path, role: MaskRole) -> Result<MaskVolume> {
    let raw = read_volume(path)?;
    MaskVolume::from_labels(&raw.values, raw.geometry, role).map_err(|e| PipelineError::data(path, e))
}

/// Voxel types that can be written to disk.
pub trait VoxelType: Copy + nifti::DataElement {
    const MET: &'static str;
    fn le_bytes(self, out: &mut Vec<u8>);
    fn write_nifti_array(arr: &Array3<Self>, opts: WriterOptions) -> nifti::Result<()>;
}

impl VoxelType for f32 {
    fn write_nifti_array(arr: &Array3<Self>, opts: WriterOptions) -> nifti::Result<()> {
        opts.write_nifti(arr)
    }
    const MET: &'static str = "MET_FLOAT";
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl VoxelType for u8 {
    fn write_nifti_array(arr: &Array3<Self>, opts: WriterOptions) -> nifti::Result<()> {
        opts.write_nifti(arr)
    }
    const MET: &'static str = "MET_UCHAR";
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.push(self);
    }
}

/// Writes in the format named by the file extension.
pub fn write_volume<T: VoxelType>(path: &Path, values: &Grid3<T>, geometry: &Geometry) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    match VolumeFormat::of(path) {
        Some(VolumeFormat::Nifti) => write_nifti(path, values, geometry),
        Some(VolumeFormat::MetaImage) => write_mha(path, values, geometry),
        None => Err(PipelineError::format(path, "unsupported volume format for writing")),
    }
}

// ------------------------------------------------------------------ NIfTI

const LPS_FLIP: [f64; 3] = [-1.0, -1.0, 1.0];

fn read_nifti(path: &Path) -> Result<RawVolume> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_error(path, e))?;
    let mut header = obj.header().clone();
    let volume = obj.into_volume();
    let arr = volume
        .into_ndarray::<f32>()
        .map_err(|e| nifti_error(path, e))?;
    let shape = arr.shape().to_vec();
    let (nx, ny, nz) = match shape.as_slice() {
        [x, y, z] => (*x, *y, *z),
        [x, y, z, 1] => (*x, *y, *z),
        [x, y] => (*x, *y, 1),
        _ => {
            return Err(PipelineError::format(
                path,
                format!("expected a 3D volume, got shape {:?}", shape),
            ))
        }
    };
    let arr = arr
        .into_shape_with_order(((nx, ny, nz), ndarray::Order::ColumnMajor))
        .map_err(|e| PipelineError::format(path, e.to_string()))?;
    let values = Grid3::from_fn([nz, ny, nx], |z, y, x| arr[[x, y, z]]);

    if header.sform_code == 0 && header.qform_code != 0 {
        if header.pixdim[1..4].iter().any(|&p| p <= 0.0) {
            return Err(PipelineError::format(path, "non-positive pixdim"));
        }
        if header.pixdim[0] != -1.0 {
            // qfac 0 is common in the wild and means +1
            header.pixdim[0] = 1.0;
        }
    }
    let a: Matrix4<f64> = header.affine();
    let mut spacing_xyz = [0.0; 3];
    let mut direction = [[0.0; 3]; 3];
    for c in 0..3 {
        let col = [a[(0, c)], a[(1, c)], a[(2, c)]];
        let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(PipelineError::format(path, "degenerate affine"));
        }
        spacing_xyz[c] = norm;
        for r in 0..3 {
            direction[r][c] = LPS_FLIP[r] * col[r] / norm;
        }
    }
    let origin = [
        LPS_FLIP[0] * a[(0, 3)],
        LPS_FLIP[1] * a[(1, 3)],
        LPS_FLIP[2] * a[(2, 3)],
    ];
    Ok(RawVolume {
        values,
        geometry: Geometry {
            spacing: [spacing_xyz[2], spacing_xyz[1], spacing_xyz[0]],
            origin,
            direction: orthonormalize(direction),
        },
    })
}

/// Removes float32 storage noise from a direction matrix (Gram-Schmidt on
/// the columns). Sheared inputs stay sheared enough to fail validation.
fn orthonormalize(d: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let col = |c: usize| [d[0][c], d[1][c], d[2][c]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut cols: Vec<[f64; 3]> = Vec::with_capacity(3);
    for c in 0..3 {
        let mut v = col(c);
        for u in &cols {
            let p = dot(v, *u);
            if p.abs() > 1e-5 {
                return d;
            }
            v = [v[0] - p * u[0], v[1] - p * u[1], v[2] - p * u[2]];
        }
        let n = dot(v, v).sqrt();
        v = [v[0] / n, v[1] / n, v[2] / n];
        cols.push(v);
    }
    let mut out = [[0.0; 3]; 3];
    for (c, v) in cols.iter().enumerate() {
        for r in 0..3 {
            out[r][c] = v[r];
        }
    }
    out
}

fn nifti_error(path: &Path, e: nifti::NiftiError) -> PipelineError {
    match e {
        nifti::NiftiError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            PipelineError::io(path, io)
        }
        other => PipelineError::format(path, other.to_string()),
    }
}

fn nifti_header(geometry: &Geometry) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    let [dz, dy, dx] = geometry.spacing;
    h.pixdim = [1.0, dx as f32, dy as f32, dz as f32, 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = 2; // millimetres
    let spacing_xyz = [dx, dy, dz];
    let mut m = Matrix4::<f64>::identity();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = LPS_FLIP[r] * geometry.direction[r][c] * spacing_xyz[c];
        }
        m[(r, 3)] = LPS_FLIP[r] * geometry.origin[r];
    }
    h.set_sform(&m, XForm::ScannerAnat);
    h.set_qform(&m, XForm::ScannerAnat);
    h
}

fn write_nifti<T: VoxelType>(path: &Path, values: &Grid3<T>, geometry: &Geometry) -> Result<()> {
    let [nz, ny, nx] = values.dims();
    // the grid is x-fastest, which is NIfTI's on-disk order
    let arr = Array3::from_shape_vec((nx, ny, nz).f(), values.as_slice().to_vec())
        .map_err(|e| PipelineError::format(path, e.to_string()))?;
    let header = nifti_header(geometry);
    T::write_nifti_array(&arr, WriterOptions::new(path).reference_header(&header))
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => PipelineError::io(path, io),
            other => PipelineError::format(path, other.to_string()),
        })
}

// -------------------------------------------------------------- MetaImage

fn read_mha(path: &Path) -> Result<RawVolume> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let bad = |m: String| PipelineError::format(path, m);

    let mut fields: Vec<(String, String)> = Vec::new();
    let mut pos = 0usize;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| bad("MetaImage header has no ElementDataFile line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| bad("MetaImage header is not text".into()))?
            .trim();
        pos = end + 1;
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line `{}`", line)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        let done = k == "ElementDataFile";
        fields.push((k, v));
        if done {
            break;
        }
    }
    let get = |k: &str| fields.iter().find(|(n, _)| n == k).map(|(_, v)| v.as_str());
    let nums = |k: &str| -> Result<Option<Vec<f64>>> {
        get(k)
            .map(|v| {
                v.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number in {}", k))))
                    .collect()
            })
            .transpose()
    };

    if get("ElementDataFile") != Some("LOCAL") {
        return Err(bad("only single-file MetaImage (ElementDataFile = LOCAL) is supported".into()));
    }
    let ndims: usize = get("NDims")
        .ok_or_else(|| bad("missing NDims".into()))?
        .parse()
        .map_err(|_| bad("bad NDims".into()))?;
    if !(2..=3).contains(&ndims) {
        return Err(bad(format!("expected a 2D or 3D image, got NDims = {}", ndims)));
    }
    if get("ElementNumberOfChannels").is_some_and(|c| c != "1") {
        return Err(bad("multi-channel MetaImage is not supported".into()));
    }
    let mut dim: Vec<usize> = nums("DimSize")?
        .ok_or_else(|| bad("missing DimSize".into()))?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    if dim.len() != ndims || dim.iter().any(|&d| d == 0) {
        return Err(bad(format!("bad DimSize {:?}", dim)));
    }
    let mut spacing = nums("ElementSpacing")?
        .or(nums("ElementSize")?)
        .unwrap_or_else(|| vec![1.0; ndims]);
    let mut origin = nums("Offset")?
        .or(nums("Position")?)
        .or(nums("Origin")?)
        .unwrap_or_else(|| vec![0.0; ndims]);
    let mut tm = nums("TransformMatrix")?
        .or(nums("Rotation")?)
        .or(nums("Orientation")?)
        .unwrap_or_else(|| {
            let mut m = vec![0.0; ndims * ndims];
            (0..ndims).for_each(|i| m[i * ndims + i] = 1.0);
            m
        });
    if spacing.len() != ndims || origin.len() != ndims || tm.len() != ndims * ndims {
        return Err(bad("inconsistent geometry field lengths".into()));
    }
    if ndims == 2 {
        dim.push(1);
        spacing.push(1.0);
        origin.push(0.0);
        tm = vec![tm[0], tm[1], 0.0, tm[2], tm[3], 0.0, 0.0, 0.0, 1.0];
    }
    let msb = matches!(
        get("BinaryDataByteOrderMSB").or(get("ElementByteOrderMSB")),
        Some("True") | Some("true")
    );
    let compressed = matches!(get("CompressedData"), Some("True") | Some("true"));
    let elem = get("ElementType").ok_or_else(|| bad("missing ElementType".into()))?;
    let width = match elem {
        "MET_UCHAR" | "MET_CHAR" => 1,
        "MET_SHORT" | "MET_USHORT" => 2,
        "MET_INT" | "MET_UINT" | "MET_FLOAT" => 4,
        "MET_DOUBLE" => 8,
        other => return Err(bad(format!("unsupported ElementType {}", other))),
    };

    let payload = &bytes[pos..];
    let data: Vec<u8> = if compressed {
        let mut out = Vec::new();
        ZlibDecoder::new(payload)
            .read_to_end(&mut out)
            .map_err(|e| bad(format!("corrupt compressed data: {}", e)))?;
        out
    } else {
        payload.to_vec()
    };
    let n = dim[0] * dim[1] * dim[2];
    if data.len() < n * width {
        return Err(bad(format!(
            "truncated data: need {} bytes, found {}",
            n * width,
            data.len()
        )));
    }
    let word = |i: usize| -> [u8; 8] {
        let mut w = [0u8; 8];
        let src = &data[i * width..(i + 1) * width];
        if msb {
            for (j, b) in src.iter().rev().enumerate() {
                w[j] = *b;
            }
        } else {
            w[..width].copy_from_slice(src);
        }
        w
    };
    let value = |i: usize| -> f32 {
        let w = word(i);
        match elem {
            "MET_UCHAR" => w[0] as f32,
            "MET_CHAR" => w[0] as i8 as f32,
            "MET_SHORT" => i16::from_le_bytes([w[0], w[1]]) as f32,
            "MET_USHORT" => u16::from_le_bytes([w[0], w[1]]) as f32,
            "MET_INT" => i32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f32,
            "MET_UINT" => u32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f32,
            "MET_FLOAT" => f32::from_le_bytes([w[0], w[1], w[2], w[3]]),
            _ => f64::from_le_bytes(w) as f32,
        }
    };
    let values = Grid3::from_vec([dim[2], dim[1], dim[0]], (0..n).map(value).collect())?;
    // TransformMatrix lists the direction of index axis 0, then 1, then 2
    let mut direction = [[0.0; 3]; 3];
    for c in 0..3 {
        for r in 0..3 {
            direction[r][c] = tm[c * 3 + r];
        }
    }
    Ok(RawVolume {
        values,
        geometry: Geometry {
            spacing: [spacing[2], spacing[1], spacing[0]],
            origin: [origin[0], origin[1], origin[2]],
            direction,
        },
    })
}

fn write_mha<T: VoxelType>(path: &Path, values: &Grid3<T>, geometry: &Geometry) -> Result<()> {
    let [nz, ny, nx] = values.dims();
    let d = &geometry.direction;
    let tm: Vec<String> = (0..3)
        .flat_map(|c| (0..3).map(move |r| d[r][c].to_string()))
        .collect();
    let [sz, sy, sx] = geometry.spacing;
    let o = geometry.origin;
    let mut out = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         CompressedData = False\nTransformMatrix = {}\nOffset = {} {} {}\n\
         ElementSpacing = {} {} {}\nDimSize = {} {} {}\nElementType = {}\nElementDataFile = LOCAL\n",
        tm.join(" "),
        o[0],
        o[1],
        o[2],
        sx,
        sy,
        sz,
        nx,
        ny,
        nz,
        T::MET
    )
    .into_bytes();
    for &v in values.as_slice() {
        v.le_bytes(&mut out);
    }
    let mut f = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    f.write_all(&out).map_err(|e| PipelineError::io(path, e))
}
