//! Volume file formats.
//!
//! * NIfTI-1 single file (`.nii`): uncompressed little-endian, datatypes
//!   uint8 (2), int16 (4) and float32 (16). Only spacing and origin are kept
//!   from the orientation fields.
//! * AF3D raw (`.af3d`): a 65-byte header (`"AF3D"`, three `u32` dims, three
//!   `f64` spacings, three `f64` origin components, one `u8` dtype) followed
//!   by little-endian samples, x-fastest; vector samples are interleaved.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::{Grid, LabelVolume, VectorField, Volume3};
use crate::error::{Error, Result};
use crate::scalar::Real;

const NIFTI_HEADER: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const AF3D_MAGIC: &[u8; 4] = b"AF3D";
const AF3D_HEADER: usize = 65;

/// AF3D sample types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum RawDtype {
    F32 = 1,
    F64 = 2,
    Vec3F32 = 3,
    Vec3F64 = 4,
}

impl RawDtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::F32),
            2 => Some(Self::F64),
            3 => Some(Self::Vec3F32),
            4 => Some(Self::Vec3F64),
            _ => None,
        }
    }

    fn bytes_per_voxel(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::Vec3F32 => 12,
            Self::Vec3F64 => 24,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => Ok(Self::Nifti),
            Some("af3d") => Ok(Self::Raw),
            Some("gz") => Err(Error::Config(format!(
                "{}: compressed NIfTI is not supported",
                path.display()
            ))),
            _ => Err(Error::Config(format!(
                "{}: unknown volume extension (expected .nii or .af3d)",
                path.display()
            ))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Nifti => "nii",
            Self::Raw => "af3d",
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn le_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn le_f64(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

struct NiftiImage {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    datatype: i16,
    slope: f64,
    inter: f64,
    raw: Vec<f64>,
}

fn parse_nifti(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < NIFTI_HEADER {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs {NIFTI_HEADER}", bytes.len()),
        });
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::BadMagic { path: path.into() });
    }
    if le_i32(bytes, 0) != NIFTI_HEADER as i32 {
        return Err(Error::InvalidInput(format!(
            "{}: sizeof_hdr is not 348 (big-endian files are not supported)",
            path.display()
        )));
    }
    let ndim = le_i16(bytes, 40);
    let dim: Vec<i16> = (0..8).map(|i| le_i16(bytes, 40 + 2 * i)).collect();
    if !(1..=7).contains(&ndim) {
        return Err(Error::InvalidInput(format!("{}: invalid dim[0] = {ndim}", path.display())));
    }
    let extra: i64 = (4..=ndim as usize).map(|i| dim[i].max(1) as i64).product();
    if extra > 1 {
        return Err(Error::InvalidInput(format!(
            "{}: multi-frame volumes are not supported",
            path.display()
        )));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if a < ndim as usize {
            if dim[a + 1] < 1 {
                return Err(Error::InvalidInput(format!("{}: non-positive dim", path.display())));
            }
            dims[a] = dim[a + 1] as usize;
        }
    }
    let datatype = le_i16(bytes, 70);
    let bytes_per = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::UnsupportedDatatype {
                path: path.into(),
                code: other as i32,
            })
        }
    };
    let mut spacing = [1.0f64; 3];
    for a in 0..3 {
        let p = le_f32(bytes, 76 + 4 * (a + 1)).abs() as f64;
        if p > 0.0 && p.is_finite() {
            spacing[a] = p;
        }
    }
    let vox_offset = le_f32(bytes, 108);
    let vox_offset = if vox_offset.is_finite() && vox_offset >= NIFTI_HEADER as f32 {
        vox_offset as usize
    } else {
        NIFTI_VOX_OFFSET
    };
    let mut slope = le_f32(bytes, 112) as f64;
    let mut inter = le_f32(bytes, 116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    if !inter.is_finite() {
        inter = 0.0;
    }
    let qform = le_i16(bytes, 252);
    let sform = le_i16(bytes, 254);
    let mut origin = [0.0f64; 3];
    if sform > 0 {
        let rows: Vec<[f32; 4]> = (0..3)
            .map(|r| [0, 1, 2, 3].map(|c| le_f32(bytes, 280 + 16 * r + 4 * c)))
            .collect();
        for a in 0..3 {
            origin[a] = rows[a][3] as f64;
        }
        let off_diag = (0..3).any(|r| (0..3).any(|c| r != c && rows[r][c] != 0.0));
        let flipped = (0..3).any(|a| rows[a][a] < 0.0);
        if off_diag || flipped {
            log::warn!(
                "{}: sform rotation/flip ignored; only spacing and origin are used",
                path.display()
            );
        }
    } else if qform > 0 {
        for a in 0..3 {
            origin[a] = le_f32(bytes, 268 + 4 * a) as f64;
        }
        let quat = [256, 260, 264].map(|o| le_f32(bytes, o));
        if quat.iter().any(|&q| q != 0.0) {
            log::warn!(
                "{}: qform rotation ignored; only spacing and origin are used",
                path.display()
            );
        }
    }
    let n: usize = dims.iter().product();
    let need = vox_offset + n * bytes_per;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, data needs {need}", bytes.len()),
        });
    }
    let body = &bytes[vox_offset..need];
    let raw: Vec<f64> = match datatype {
        DT_UINT8 => body.iter().map(|&b| b as f64).collect(),
        DT_INT16 => body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        _ => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    Ok(NiftiImage { dims, spacing, origin, datatype, slope, inter, raw })
}

fn nifti_header(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], datatype: i16) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(NIFTI_HEADER as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    let bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        _ => 32,
    };
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, spacing[a] as f32);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // mm
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, origin[a] as f32);
    }
    for r in 0..3 {
        put_f32(&mut h, 280 + 16 * r + 4 * r, spacing[r] as f32);
        put_f32(&mut h, 280 + 16 * r + 12, origin[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn grid_from<T: Real>(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Grid<T>> {
    Grid::new(dims, spacing.map(T::lit), origin.map(T::lit))
}

struct RawImage {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: RawDtype,
    body: Vec<f64>,
}

fn parse_raw(path: &Path, bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < 4 || &bytes[0..4] != AF3D_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < AF3D_HEADER {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs {AF3D_HEADER}", bytes.len()),
        });
    }
    let dims = [0, 1, 2].map(|a| le_u32(bytes, 4 + 4 * a) as usize);
    let spacing = [0, 1, 2].map(|a| le_f64(bytes, 16 + 8 * a));
    let origin = [0, 1, 2].map(|a| le_f64(bytes, 40 + 8 * a));
    let dtype = RawDtype::from_code(bytes[64]).ok_or(Error::UnsupportedDatatype {
        path: path.into(),
        code: bytes[64] as i32,
    })?;
    let n: usize = dims.iter().product();
    let need = AF3D_HEADER + n * dtype.bytes_per_voxel();
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, data needs {need}", bytes.len()),
        });
    }
    let data = &bytes[AF3D_HEADER..need];
    let body = match dtype {
        RawDtype::F32 | RawDtype::Vec3F32 => {
            data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        }
        RawDtype::F64 | RawDtype::Vec3F64 => {
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
    };
    Ok(RawImage { dims, spacing, origin, dtype, body })
}

fn raw_header<T: Real>(grid: &Grid<T>, dtype: RawDtype) -> Vec<u8> {
    let mut h = Vec::with_capacity(AF3D_HEADER);
    h.extend_from_slice(AF3D_MAGIC);
    for a in 0..3 {
        h.extend_from_slice(&(grid.dims[a] as u32).to_le_bytes());
    }
    for a in 0..3 {
        h.extend_from_slice(&grid.spacing[a].as_f64().to_le_bytes());
    }
    for a in 0..3 {
        h.extend_from_slice(&grid.origin[a].as_f64().to_le_bytes());
    }
    h.push(dtype as u8);
    h
}

/// Reads a scalar volume; NIfTI values are scaled by `scl_slope`/`scl_inter`.
pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume3<T>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => {
            let img = parse_nifti(path, &bytes)?;
            let grid = grid_from(img.dims, img.spacing, img.origin)?;
            let data = img.raw.iter().map(|&v| T::lit(img.slope * v + img.inter)).collect();
            Volume3::new(grid, data)
        }
        VolumeFormat::Raw => {
            let img = parse_raw(path, &bytes)?;
            if matches!(img.dtype, RawDtype::Vec3F32 | RawDtype::Vec3F64) {
                return Err(Error::InvalidInput(format!(
                    "{}: file holds a vector field, expected a scalar volume",
                    path.display()
                )));
            }
            let grid = grid_from(img.dims, img.spacing, img.origin)?;
            Volume3::new(grid, img.body.into_iter().map(T::lit).collect())
        }
    }
}

/// Writes a scalar volume as NIfTI float32 or AF3D float64, by extension.
pub fn write_volume<T: Real>(vol: &Volume3<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let grid = vol.grid();
    let bytes = match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => {
            let mut b = nifti_header(
                grid.dims,
                grid.spacing.map(|s| s.as_f64()),
                grid.origin.map(|s| s.as_f64()),
                DT_FLOAT32,
            );
            for &v in vol.data() {
                b.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            b
        }
        VolumeFormat::Raw => {
            let mut b = raw_header(grid, RawDtype::F64);
            for &v in vol.data() {
                b.extend_from_slice(&v.as_f64().to_le_bytes());
            }
            b
        }
    };
    write_bytes(path, &bytes)
}

/// Reads an integer label volume (NIfTI uint8/int16, unscaled).
pub fn read_labels<T: Real>(path: impl AsRef<Path>) -> Result<LabelVolume<T>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if VolumeFormat::from_path(path)? != VolumeFormat::Nifti {
        return Err(Error::Config(format!("{}: labels must be NIfTI", path.display())));
    }
    let img = parse_nifti(path, &bytes)?;
    if img.datatype == DT_FLOAT32 {
        return Err(Error::UnsupportedDatatype {
            path: path.into(),
            code: DT_FLOAT32 as i32,
        });
    }
    if img.raw.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput(format!("{}: negative label", path.display())));
    }
    let grid = grid_from(img.dims, img.spacing, img.origin)?;
    LabelVolume::new(grid, img.raw.iter().map(|&v| v as u16).collect())
}

/// Writes labels as NIfTI uint8 when they fit, int16 otherwise.
pub fn write_labels<T: Real>(labels: &LabelVolume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if VolumeFormat::from_path(path)? != VolumeFormat::Nifti {
        return Err(Error::Config(format!("{}: labels must be NIfTI", path.display())));
    }
    let max = labels.data().iter().copied().max().unwrap_or(0);
    if max > i16::MAX as u16 {
        return Err(Error::InvalidInput(format!("label {max} exceeds int16 range")));
    }
    let grid = labels.grid();
    let dt = if max <= u8::MAX as u16 { DT_UINT8 } else { DT_INT16 };
    let mut b = nifti_header(
        grid.dims,
        grid.spacing.map(|s| s.as_f64()),
        grid.origin.map(|s| s.as_f64()),
        dt,
    );
    for &l in labels.data() {
        if dt == DT_UINT8 {
            b.push(l as u8);
        } else {
            b.extend_from_slice(&(l as i16).to_le_bytes());
        }
    }
    write_bytes(path, &b)
}

/// Reads a vector field from AF3D.
pub fn read_vector_field<T: Real>(path: impl AsRef<Path>) -> Result<VectorField<T>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let img = parse_raw(path, &bytes)?;
    if !matches!(img.dtype, RawDtype::Vec3F32 | RawDtype::Vec3F64) {
        return Err(Error::InvalidInput(format!(
            "{}: file holds a scalar volume, expected a vector field",
            path.display()
        )));
    }
    let grid = grid_from(img.dims, img.spacing, img.origin)?;
    let data = img
        .body
        .chunks_exact(3)
        .map(|c| Vector3::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])))
        .collect();
    VectorField::new(grid, data)
}

/// Writes a vector field as AF3D float64 triples.
pub fn write_vector_field<T: Real>(field: &VectorField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut b = raw_header(field.grid(), RawDtype::Vec3F64);
    for v in field.data() {
        for a in 0..3 {
            b.extend_from_slice(&v[a].as_f64().to_le_bytes());
        }
    }
    write_bytes(path, &b)
}
