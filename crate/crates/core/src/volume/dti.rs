//! Log-linear diffusion tensor fit and fractional anisotropy.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rayon::prelude::*;

use super::{DwiVolume, MapKind, ScalarMap, B0_THRESHOLD};
use crate::{Error, Result, Vec3};

/// FA from three tensor eigenvalues; 0 for a zero tensor.
pub fn fa_from_eigenvalues(l: [f64; 3]) -> f64 {
    let num = (l[0] - l[1]).powi(2) + (l[1] - l[2]).powi(2) + (l[2] - l[0]).powi(2);
    let den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if den <= 0.0 {
        return 0.0;
    }
    (0.5 * num / den).sqrt().clamp(0.0, 1.0)
}

pub fn fa_from_tensor(d: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*d);
    let e = eig.eigenvalues;
    fa_from_eigenvalues([e[0], e[1], e[2]])
}

/// Least-squares tensor from `-ln(S/S0)/b = g^T D g` over channels with b
/// above the b=0 threshold.
pub fn fit_tensor(signal: &[f64], gradients: &[Vec3], bvalues: &[f64], s0: f64) -> Result<Matrix3<f64>> {
    if signal.len() != gradients.len() || signal.len() != bvalues.len() {
        return Err(Error::invalid("signal, gradients and b-values differ in length"));
    }
    if !(s0 > 0.0) {
        return Err(Error::invalid(format!("s0 must be positive, got {s0}")));
    }
    let rows: Vec<usize> = (0..signal.len()).filter(|&i| bvalues[i] > B0_THRESHOLD).collect();
    if rows.len() < 6 {
        return Err(Error::invalid(format!("tensor fit needs 6 weighted channels, got {}", rows.len())));
    }
    let mut a = DMatrix::zeros(rows.len(), 6);
    let mut y = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        if !(signal[i] > 0.0) {
            return Err(Error::invalid(format!("non-positive signal {} in channel {i}", signal[i])));
        }
        let g = gradients[i];
        a[(r, 0)] = g.x * g.x;
        a[(r, 1)] = g.y * g.y;
        a[(r, 2)] = g.z * g.z;
        a[(r, 3)] = 2.0 * g.x * g.y;
        a[(r, 4)] = 2.0 * g.x * g.z;
        a[(r, 5)] = 2.0 * g.y * g.z;
        y[r] = -(signal[i] / s0).ln() / bvalues[i];
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    if !(svd.singular_values.min() > 1e-10 * max_sv) {
        return Err(Error::invalid("gradient directions do not determine a tensor"));
    }
    let x = svd.solve(&y, 1e-14 * max_sv).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Matrix3::new(x[0], x[3], x[4], x[3], x[1], x[5], x[4], x[5], x[2]))
}

pub fn fa_from_signal(signal: &[f64], gradients: &[Vec3], bvalues: &[f64], s0: f64) -> Result<f64> {
    fit_tensor(signal, gradients, bvalues, s0).map(|d| fa_from_tensor(&d))
}

/// FA map from a DWI volume; `s0` per voxel is the mean of its b=0
/// channels. Voxels where the fit is undefined (background) get 0.
pub fn fa_map(volume: &DwiVolume) -> Result<ScalarMap> {
    let b0 = volume.b0_channels();
    if b0.is_empty() {
        return Err(Error::invalid("FA map needs at least one b=0 channel"));
    }
    let g = volume.channels();
    let data: Vec<f64> = volume
        .data()
        .par_chunks(g)
        .map(|voxel| {
            let s0 = b0.iter().map(|&c| voxel[c]).sum::<f64>() / b0.len() as f64;
            fa_from_signal(voxel, volume.gradients(), volume.bvalues(), s0).unwrap_or(0.0)
        })
        .collect();
    ScalarMap::new(volume.dims(), data, *volume.affine(), MapKind::Fa)
}
