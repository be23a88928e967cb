//! Uncompressed little-endian NIfTI-1 (`.nii`) reading and writing.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::{Affine, Error, Result};

pub const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";
const DEFAULT_VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Voxel storage types this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            64 => Ok(Datatype::Float64),
            other => Err(Error::UnsupportedDatatype(format!("NIfTI datatype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// A 3D or 4D image in file order (x fastest, then y, z, volume).
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub dims: Vec<usize>,
    pub affine: Affine,
    pub data: Vec<f64>,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Parses a NIfTI-1 file image held in memory.
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
        return Err(Error::format("missing NIfTI-1 magic \"n+1\""));
    }
    if i32_at(bytes, offsets::SIZEOF_HDR) != HEADER_SIZE as i32 {
        return Err(Error::format("sizeof_hdr is not 348 (big-endian files are not supported)"));
    }
    let ndim = i16_at(bytes, offsets::DIM);
    if ndim != 3 && ndim != 4 {
        return Err(Error::format(format!("dim[0] = {ndim}, expected 3 or 4")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let d = i16_at(bytes, offsets::DIM + 2 * i);
        if d < 1 {
            return Err(Error::format(format!("dim[{i}] = {d}")));
        }
        dims.push(d as usize);
    }
    let datatype = Datatype::from_code(i16_at(bytes, offsets::DATATYPE))?;
    let vox_offset = f32_at(bytes, offsets::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::format(format!("vox_offset {vox_offset} lies inside the header")));
    }
    let start = vox_offset as usize;
    let count: usize = dims.iter().product();
    let end = start + count * datatype.size();
    if bytes.len() < end {
        return Err(Error::format(format!("data section truncated: need {end} bytes, have {}", bytes.len())));
    }
    let raw = &bytes[start..end];
    let mut data: Vec<f64> = match datatype {
        Datatype::Uint8 => raw.iter().map(|v| *v as f64).collect(),
        Datatype::Int16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        Datatype::Float32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Datatype::Float64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let slope = f32_at(bytes, offsets::SCL_SLOPE) as f64;
    let inter = f32_at(bytes, offsets::SCL_INTER) as f64;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        data.iter_mut().for_each(|v| *v = slope * *v + inter);
    }
    Ok(NiftiImage { dims, affine: header_affine(bytes), data })
}

/// sform when `sform_code > 0`, else qform when `qform_code > 0`, else a
/// scaled identity from pixdim.
fn header_affine(b: &[u8]) -> Affine {
    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(b, offsets::PIXDIM + 4 * i) as f64).collect();
    if i16_at(b, offsets::SFORM_CODE) > 0 {
        let mut a = Affine::identity();
        for r in 0..3 {
            for c in 0..4 {
                a[(r, c)] = f32_at(b, offsets::SROW_X + 16 * r + 4 * c) as f64;
            }
        }
        return a;
    }
    if i16_at(b, offsets::QFORM_CODE) > 0 {
        let qb = f32_at(b, offsets::QUATERN_B) as f64;
        let qc = f32_at(b, offsets::QUATERN_B + 4) as f64;
        let qd = f32_at(b, offsets::QUATERN_B + 8) as f64;
        let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let rot = Matrix3::new(
            qa * qa + qb * qb - qc * qc - qd * qd,
            2.0 * (qb * qc - qa * qd),
            2.0 * (qb * qd + qa * qc),
            2.0 * (qb * qc + qa * qd),
            qa * qa + qc * qc - qb * qb - qd * qd,
            2.0 * (qc * qd - qa * qb),
            2.0 * (qb * qd - qa * qc),
            2.0 * (qc * qd + qa * qb),
            qa * qa + qd * qd - qc * qc - qb * qb,
        );
        let scale = Matrix3::from_diagonal(&Vector3::new(pixdim[1], pixdim[2], qfac * pixdim[3]));
        let lin = rot * scale;
        let mut a = Affine::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        for r in 0..3 {
            a[(r, 3)] = f32_at(b, offsets::QOFFSET_X + 4 * r) as f64;
        }
        return a;
    }
    let mut a = Affine::identity();
    for i in 0..3 {
        a[(i, i)] = if pixdim[i + 1] > 0.0 { pixdim[i + 1] } else { 1.0 };
    }
    a
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    parse_nifti(&fs::read(path)?)
}

/// Serialises with `sform_code = 1` holding the affine and `qform_code = 0`.
pub fn encode_nifti(image: &NiftiImage, datatype: Datatype) -> Result<Vec<u8>> {
    let nd = image.dims.len();
    if nd != 3 && nd != 4 {
        return Err(Error::invalid(format!("NIfTI writer needs 3 or 4 dims, got {nd}")));
    }
    if image.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::invalid(format!("dimension out of range in {:?}", image.dims)));
    }
    if image.data.len() != image.dims.iter().product::<usize>() {
        return Err(Error::invalid("data length does not match dims"));
    }
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut h, offsets::DIM, nd as i16);
    for i in 0..7 {
        let d = image.dims.get(i).copied().unwrap_or(1) as i16;
        put_i16(&mut h, offsets::DIM + 2 * (i + 1), d);
    }
    put_i16(&mut h, offsets::DATATYPE, datatype.code());
    put_i16(&mut h, offsets::BITPIX, (datatype.size() * 8) as i16);
    put_f32(&mut h, offsets::PIXDIM, 1.0);
    for i in 0..3 {
        let col = image.affine.fixed_view::<3, 1>(0, i).norm();
        put_f32(&mut h, offsets::PIXDIM + 4 * (i + 1), col as f32);
    }
    if nd == 4 {
        put_f32(&mut h, offsets::PIXDIM + 16, 1.0);
    }
    put_f32(&mut h, offsets::VOX_OFFSET, DEFAULT_VOX_OFFSET as f32);
    put_f32(&mut h, offsets::SCL_SLOPE, 1.0);
    put_f32(&mut h, offsets::SCL_INTER, 0.0);
    h[offsets::XYZT_UNITS] = 2; // mm
    put_i16(&mut h, offsets::QFORM_CODE, 0);
    put_i16(&mut h, offsets::SFORM_CODE, 1);
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut h, offsets::SROW_X + 16 * r + 4 * c, image.affine[(r, c)] as f32);
        }
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);

    h.reserve(image.data.len() * datatype.size());
    match datatype {
        Datatype::Uint8 => h.extend(image.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8)),
        Datatype::Int16 => {
            for v in &image.data {
                h.extend_from_slice(&(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes());
            }
        }
        Datatype::Float32 => {
            for v in &image.data {
                h.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Datatype::Float64 => {
            for v in &image.data {
                h.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(h)
}

pub fn write_nifti_as(image: &NiftiImage, path: &Path, datatype: Datatype) -> Result<()> {
    let bytes = encode_nifti(image, datatype)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes float32 data.
pub fn write_nifti(image: &NiftiImage, path: &Path) -> Result<()> {
    write_nifti_as(image, path, Datatype::Float32)
}
