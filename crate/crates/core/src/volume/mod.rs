//! Diffusion volumes, scalar maps, and the sampling operations the model and
//! tracker need.
//!
//! Voxel data is stored with x varying fastest. A [`DwiVolume`] keeps the
//! `G` channel values of a voxel contiguous so that per-point feature vectors
//! and 3x3x3 cubes can be read without gathering.

pub mod dti;
pub mod gradients;
pub mod nifti;
pub mod sh;

use rayon::prelude::*;

use crate::sphere::Sphere;
use crate::{Affine, Error, Result, Vec3};

pub use nifti::{read_nifti, write_nifti, Datatype, NiftiImage};

/// b-values at or below this are treated as non-diffusion-weighted.
pub const B0_THRESHOLD: f64 = 50.0;

/// 4D diffusion signal grid with its voxel-to-RAS affine and gradient table.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
    affine: Affine,
    inverse: Affine,
    gradients: Vec<Vec3>,
    bvalues: Vec<f64>,
}

impl DwiVolume {
    /// `data` is voxel-major (x fastest) with the `G` channels of each voxel
    /// contiguous.
    pub fn new(
        dims: [usize; 3],
        data: Vec<f64>,
        affine: Affine,
        gradients: Vec<Vec3>,
        bvalues: Vec<f64>,
    ) -> Result<Self> {
        let channels = gradients.len();
        if channels == 0 || bvalues.len() != channels {
            return Err(Error::invalid(format!(
                "gradient table has {} vectors and {} b-values",
                channels,
                bvalues.len()
            )));
        }
        let voxels: usize = dims.iter().product();
        if voxels == 0 || data.len() != voxels * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {dims:?} x {channels}",
                data.len()
            )));
        }
        for (i, (g, b)) in gradients.iter().zip(&bvalues).enumerate() {
            if *b > B0_THRESHOLD && (g.norm() - 1.0).abs() > 1e-3 {
                return Err(Error::invalid(format!("gradient {i} is not unit-norm")));
            }
        }
        let inverse = invert_affine(&affine)?;
        Ok(Self { dims, channels, data, affine, inverse, gradients, bvalues })
    }

    /// Converts a 4D NIfTI image (x, y, z, g in file order) into a volume.
    pub fn from_nifti(image: &NiftiImage, gradients: Vec<Vec3>, bvalues: Vec<f64>) -> Result<Self> {
        let (dims, g) = match image.dims.as_slice() {
            [x, y, z, g] => ([*x, *y, *z], *g),
            [x, y, z] => ([*x, *y, *z], 1),
            other => return Err(Error::format(format!("expected 3D/4D image, got {other:?}"))),
        };
        if g != gradients.len() {
            return Err(Error::invalid(format!(
                "image has {g} volumes but gradient table has {}",
                gradients.len()
            )));
        }
        let voxels = dims.iter().product::<usize>();
        let mut data = vec![0.0; voxels * g];
        for c in 0..g {
            for v in 0..voxels {
                data[v * g + c] = image.data[c * voxels + v];
            }
        }
        Self::new(dims, data, image.affine, gradients, bvalues)
    }

    pub fn to_nifti(&self) -> NiftiImage {
        let voxels = self.voxel_count();
        let g = self.channels;
        let mut data = vec![0.0; voxels * g];
        for v in 0..voxels {
            for c in 0..g {
                data[c * voxels + v] = self.data[v * g + c];
            }
        }
        NiftiImage {
            dims: vec![self.dims[0], self.dims[1], self.dims[2], g],
            affine: self.affine,
            data,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn gradients(&self) -> &[Vec3] {
        &self.gradients
    }

    pub fn bvalues(&self) -> &[f64] {
        &self.bvalues
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let v = self.voxel_index(i, j, k);
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    pub fn ras_to_voxel(&self, p: &Vec3) -> Vec3 {
        apply_affine(&self.inverse, p)
    }

    pub fn voxel_to_ras(&self, v: &Vec3) -> Vec3 {
        apply_affine(&self.affine, v)
    }

    /// Nearest voxel to a RAS point, if it lies in the grid.
    pub fn nearest_voxel(&self, p: &Vec3) -> Option<[usize; 3]> {
        nearest_in_grid(&self.ras_to_voxel(p), self.dims)
    }

    /// Channel-wise trilinear interpolation at a RAS point.
    pub fn trilinear_sample(&self, p: &Vec3) -> Result<Vec<f64>> {
        let v = self.ras_to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = v[a];
            let top = (self.dims[a] - 1) as f64;
            if !(x >= -1e-9 && x <= top + 1e-9) {
                return Err(Error::OutOfBounds([p.x, p.y, p.z]));
            }
            let x = x.clamp(0.0, top);
            let i0 = if self.dims[a] == 1 { 0 } else { (x.floor() as usize).min(self.dims[a] - 2) };
            base[a] = i0;
            frac[a] = x - i0 as f64;
        }
        let mut out = vec![0.0; self.channels];
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                idx[a] = (base[a] + off[a]).min(self.dims[a] - 1);
            }
            if w == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(self.voxel(idx[0], idx[1], idx[2])) {
                *o += w * s;
            }
        }
        Ok(out)
    }

    /// 3x3x3 block of G-vectors centred on the nearest voxel; neighbours
    /// outside the grid are zero.
    pub fn extract_cube(&self, p: &Vec3) -> Result<VoxelCube> {
        let center = self
            .nearest_voxel(p)
            .ok_or(Error::OutOfBounds([p.x, p.y, p.z]))?;
        Ok(self.cube_at(center))
    }

    pub fn cube_at(&self, center: [usize; 3]) -> VoxelCube {
        let g = self.channels;
        let mut values = vec![0.0; 27 * g];
        for dx in 0..3 {
            for dy in 0..3 {
                for dz in 0..3 {
                    let idx = [
                        center[0] as isize + dx as isize - 1,
                        center[1] as isize + dy as isize - 1,
                        center[2] as isize + dz as isize - 1,
                    ];
                    if (0..3).any(|a| idx[a] < 0 || idx[a] >= self.dims[a] as isize) {
                        continue;
                    }
                    let slot = (dx * 3 + dy) * 3 + dz;
                    values[slot * g..(slot + 1) * g]
                        .copy_from_slice(self.voxel(idx[0] as usize, idx[1] as usize, idx[2] as usize));
                }
            }
        }
        VoxelCube { values, channels: g, center }
    }

    /// Indices of channels with b above [`B0_THRESHOLD`].
    pub fn dw_channels(&self) -> Vec<usize> {
        (0..self.channels).filter(|&c| self.bvalues[c] > B0_THRESHOLD).collect()
    }

    pub fn b0_channels(&self) -> Vec<usize> {
        (0..self.channels).filter(|&c| self.bvalues[c] <= B0_THRESHOLD).collect()
    }
}

/// 3x3x3xG neighbourhood; slot `(dx*3 + dy)*3 + dz` holds offset
/// `(dx-1, dy-1, dz-1)` from the centre voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCube {
    values: Vec<f64>,
    channels: usize,
    center: [usize; 3],
}

impl VoxelCube {
    pub fn new(values: Vec<f64>, channels: usize, center: [usize; 3]) -> Result<Self> {
        if channels == 0 || values.len() != 27 * channels {
            return Err(Error::invalid(format!(
                "cube needs 27 x {channels} values, got {}",
                values.len()
            )));
        }
        Ok(Self { values, channels, center })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn center(&self) -> [usize; 3] {
        self.center
    }

    pub fn slot(&self, dx: usize, dy: usize, dz: usize) -> &[f64] {
        let s = (dx * 3 + dy) * 3 + dz;
        &self.values[s * self.channels..(s + 1) * self.channels]
    }

    /// G-vector of the centre voxel.
    pub fn center_values(&self) -> &[f64] {
        self.slot(1, 1, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    WhiteMatterMask,
    Fa,
    Other,
}

/// 3D scalar field on a voxel grid (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    dims: [usize; 3],
    data: Vec<f64>,
    affine: Affine,
    inverse: Affine,
    kind: MapKind,
}

impl ScalarMap {
    pub fn new(dims: [usize; 3], data: Vec<f64>, affine: Affine, kind: MapKind) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() || data.is_empty() {
            return Err(Error::invalid(format!("data length {} does not match {dims:?}", data.len())));
        }
        match kind {
            MapKind::WhiteMatterMask if data.iter().any(|v| *v != 0.0 && *v != 1.0) => {
                return Err(Error::invalid("mask entries must be 0 or 1"));
            }
            MapKind::Fa if data.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                return Err(Error::invalid("FA entries must lie in [0, 1]"));
            }
            _ => {}
        }
        let inverse = invert_affine(&affine)?;
        Ok(Self { dims, data, affine, inverse, kind })
    }

    /// Reads a 3D image. Masks are binarised at 0.5 since integer-coded or
    /// resampled masks rarely hold exact 0/1 values.
    pub fn from_nifti(image: &NiftiImage, kind: MapKind) -> Result<Self> {
        let dims = match image.dims.as_slice() {
            [x, y, z] | [x, y, z, 1] => [*x, *y, *z],
            other => return Err(Error::format(format!("expected a 3D image, got {other:?}"))),
        };
        let data = match kind {
            MapKind::WhiteMatterMask => {
                image.data.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect()
            }
            MapKind::Fa => image.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            MapKind::Other => image.data.clone(),
        };
        Self::new(dims, data, image.affine, kind)
    }

    pub fn to_nifti(&self) -> NiftiImage {
        NiftiImage { dims: self.dims.to_vec(), affine: self.affine, data: self.data.clone() }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn ras_to_voxel(&self, p: &Vec3) -> Vec3 {
        apply_affine(&self.inverse, p)
    }

    pub fn voxel_to_ras(&self, v: &Vec3) -> Vec3 {
        apply_affine(&self.affine, v)
    }

    pub fn nearest_voxel(&self, p: &Vec3) -> Option<[usize; 3]> {
        nearest_in_grid(&self.ras_to_voxel(p), self.dims)
    }

    /// Value at the nearest voxel, `None` outside the grid.
    pub fn value_at(&self, p: &Vec3) -> Option<f64> {
        self.nearest_voxel(p).map(|[i, j, k]| self.get(i, j, k))
    }

    /// Voxel index triples with a positive value, in storage order.
    pub fn positive_voxels(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    if self.get(i, j, k) > 0.0 {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }
}

/// Applies the inverse of `affine` to a RAS point. No rounding.
pub fn ras_to_voxel(affine: &Affine, p: &Vec3) -> Result<Vec3> {
    Ok(apply_affine(&invert_affine(affine)?, p))
}

pub fn apply_affine(affine: &Affine, p: &Vec3) -> Vec3 {
    let h = affine * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(h.x, h.y, h.z)
}

pub fn invert_affine(affine: &Affine) -> Result<Affine> {
    if !affine.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("affine has non-finite entries"));
    }
    let linear = affine.fixed_view::<3, 3>(0, 0).into_owned();
    if linear.determinant().abs() < 1e-12 {
        return Err(Error::invalid("affine is singular"));
    }
    affine.try_inverse().ok_or_else(|| Error::invalid("affine is singular"))
}

/// Round-half-up to the nearest voxel; `None` when outside `[0, dim)`.
pub(crate) fn nearest_in_grid(v: &Vec3, dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let r = (v[a] + 0.5).floor();
        if !(r >= 0.0 && r < dims[a] as f64) {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

/// Resamples every voxel onto `target` directions through a spherical
/// harmonic fit of its b-normalised diffusion-weighted channels.
///
/// `order` defaults to [`sh::default_order`] for the number of DW channels.
/// Voxels with no positive b=0 signal come out as zeros.
pub fn resample_volume(volume: &DwiVolume, target: &Sphere, order: Option<usize>) -> Result<DwiVolume> {
    let dw = volume.dw_channels();
    let b0 = volume.b0_channels();
    let grads: Vec<Vec3> = dw.iter().map(|&c| volume.gradients[c]).collect();
    let order = order.unwrap_or_else(|| sh::default_order(grads.len()));
    let projector = sh::ShProjector::new(&grads, order, target.directions())?;
    let k = target.k();
    let g = volume.channels;

    let per_voxel: Vec<Vec<f64>> = volume
        .data
        .par_chunks(g)
        .map(|voxel| {
            let norm = if b0.is_empty() {
                1.0
            } else {
                b0.iter().map(|&c| voxel[c]).sum::<f64>() / b0.len() as f64
            };
            if !(norm > 0.0) {
                return vec![0.0; k];
            }
            let signal: Vec<f64> = dw.iter().map(|&c| voxel[c] / norm).collect();
            projector.apply(&signal)
        })
        .collect();

    let mean_b = dw.iter().map(|&c| volume.bvalues[c]).sum::<f64>() / dw.len().max(1) as f64;
    DwiVolume::new(
        volume.dims,
        per_voxel.concat(),
        volume.affine,
        target.directions().to_vec(),
        vec![mean_b; k],
    )
}
