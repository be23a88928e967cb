//! Real, even-order, symmetric spherical harmonics.
//!
//! Coefficient `j` enumerates even `l` ascending and `m = -l..=l` within each
//! band. For `m < 0` the basis function is `sqrt(2) * Im(Y_l^|m|)`, for
//! `m = 0` it is `Y_l^0` and for `m > 0` it is `sqrt(2) * Re(Y_l^m)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, Vec3};

/// Number of basis functions up to even `order`.
pub fn basis_size(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Even order `l` with `basis_size(l) == len`, if any.
pub fn order_for_size(len: usize) -> Option<usize> {
    (0..=64).step_by(2).find(|&l| basis_size(l) == len)
}

/// Order 8 for 45 or more samples; otherwise the largest even order whose
/// basis is no larger than the sample count.
pub fn default_order(samples: usize) -> usize {
    if samples >= 45 {
        return 8;
    }
    let mut order = 0;
    while basis_size(order + 2) <= samples {
        order += 2;
    }
    order
}

fn check_order(order: usize) -> Result<()> {
    if !order.is_multiple_of(2) {
        return Err(Error::invalid(format!("SH order must be even, got {order}")));
    }
    Ok(())
}

/// Normalised associated Legendre values `N_l^m P_l^m(x)` for
/// `0 <= m <= l <= order`, indexed `[l][m]`. Includes the Condon-Shortley phase.
fn normalized_legendre(order: usize, x: f64) -> Vec<Vec<f64>> {
    let somx2 = (1.0 - x * x).max(0.0).sqrt();
    let mut p = vec![vec![0.0; order + 1]; order + 1];
    // Unnormalised recurrences.
    p[0][0] = 1.0;
    for m in 1..=order {
        p[m][m] = -((2 * m - 1) as f64) * somx2 * p[m - 1][m - 1];
    }
    for m in 0..order {
        p[m + 1][m] = x * (2 * m + 1) as f64 * p[m][m];
    }
    for m in 0..=order {
        for l in (m + 2)..=order {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m]) / (l - m) as f64;
        }
    }
    for l in 0..=order {
        for m in 0..=l {
            let mut ratio = 1.0;
            for f in (l - m + 1)..=(l + m) {
                ratio /= f as f64;
            }
            p[l][m] *= ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
        }
    }
    p
}

/// Basis row for one direction.
pub fn basis_row(order: usize, dir: &Vec3) -> Vec<f64> {
    let r = dir.norm();
    let (x, y, z) = (dir.x / r, dir.y / r, dir.z / r);
    let cos_theta = z.clamp(-1.0, 1.0);
    let phi = y.atan2(x);
    let leg = normalized_legendre(order, cos_theta);
    let mut row = Vec::with_capacity(basis_size(order));
    for l in (0..=order).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let v = match m.signum() {
                -1 => std::f64::consts::SQRT_2 * leg[l][am] * (am as f64 * phi).sin(),
                0 => leg[l][0],
                _ => std::f64::consts::SQRT_2 * leg[l][am] * (am as f64 * phi).cos(),
            };
            row.push(v);
        }
    }
    row
}

/// `directions.len() x R` design matrix.
pub fn basis_matrix(order: usize, directions: &[Vec3]) -> DMatrix<f64> {
    let r = basis_size(order);
    let mut b = DMatrix::zeros(directions.len(), r);
    for (i, d) in directions.iter().enumerate() {
        for (j, v) in basis_row(order, d).into_iter().enumerate() {
            b[(i, j)] = v;
        }
    }
    b
}

/// Least-squares pseudo-inverse `R x G` of the basis at `gradients`.
fn fit_operator(gradients: &[Vec3], order: usize) -> Result<DMatrix<f64>> {
    check_order(order)?;
    let r = basis_size(order);
    if gradients.len() < r {
        return Err(Error::invalid(format!(
            "order {order} needs at least {r} directions, got {}",
            gradients.len()
        )));
    }
    let b = basis_matrix(order, gradients);
    // Thin QR: pinv(B) = R^-1 Q^T for full column rank.
    let qr = b.qr();
    let (q, rm) = (qr.q(), qr.r());
    let diag: Vec<f64> = (0..r).map(|i| rm[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if !diag.iter().all(|d| *d > 1e-10 * max) {
        return Err(Error::invalid("gradient directions do not determine the SH fit"));
    }
    rm.solve_upper_triangular(&q.transpose())
        .ok_or_else(|| Error::invalid("gradient directions do not determine the SH fit"))
}

/// Least-squares SH coefficients minimising `||B c - signal||`.
pub fn sh_fit(signal: &[f64], gradients: &[Vec3], order: usize) -> Result<Vec<f64>> {
    if signal.len() != gradients.len() {
        return Err(Error::invalid("signal and gradient counts differ"));
    }
    let pinv = fit_operator(gradients, order)?;
    Ok((pinv * DVector::from_column_slice(signal)).as_slice().to_vec())
}

/// Evaluates an SH expansion at each direction.
pub fn sh_sample(coeffs: &[f64], directions: &[Vec3]) -> Result<Vec<f64>> {
    let order = order_for_size(coeffs.len())
        .ok_or_else(|| Error::invalid(format!("{} is not a valid SH coefficient count", coeffs.len())))?;
    Ok(directions
        .iter()
        .map(|d| basis_row(order, d).iter().zip(coeffs).map(|(b, c)| b * c).sum())
        .collect())
}

/// Precomputed fit and sampling matrices for resampling many voxels that
/// share one gradient table.
#[derive(Debug, Clone)]
pub struct ShProjector {
    fit: DMatrix<f64>,
    sample: DMatrix<f64>,
}

impl ShProjector {
    pub fn new(gradients: &[Vec3], order: usize, targets: &[Vec3]) -> Result<Self> {
        let fit = fit_operator(gradients, order)?;
        let sample = basis_matrix(order, targets);
        Ok(Self { fit, sample })
    }

    pub fn coefficients(&self, signal: &[f64]) -> Vec<f64> {
        (&self.fit * DVector::from_column_slice(signal)).as_slice().to_vec()
    }

    /// Fit followed by sampling at the target directions.
    pub fn apply(&self, signal: &[f64]) -> Vec<f64> {
        let c = &self.fit * DVector::from_column_slice(signal);
        (&self.sample * c).as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::Sphere;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sizes_and_orders() {
        assert_eq!(basis_size(0), 1);
        assert_eq!(basis_size(4), 15);
        assert_eq!(basis_size(8), 45);
        assert_eq!(order_for_size(28), Some(6));
        assert_eq!(order_for_size(27), None);
        assert_eq!(default_order(100), 8);
        assert_eq!(default_order(32), 6);
        assert_eq!(default_order(15), 4);
        assert_eq!(default_order(14), 2);
    }

    #[test]
    fn constant_signal_fits_only_dc() {
        let g = Sphere::fibonacci(40).unwrap();
        let s = 2.5;
        let c = sh_fit(&vec![s; 40], g.directions(), 4).unwrap();
        assert!((c[0] - s * (4.0 * PI).sqrt()).abs() < 1e-9);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn band_limited_recovery() {
        let g = Sphere::fibonacci(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coeffs: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let signal = sh_sample(&coeffs, g.directions()).unwrap();
        let fit = sh_fit(&signal, g.directions(), 4).unwrap();
        for (a, b) in fit.iter().zip(&coeffs) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    // Normal equations solved by hand-rolled Gaussian elimination.
    fn normal_equations_fit(signal: &[f64], dirs: &[Vec3], order: usize) -> Vec<f64> {
        let r = basis_size(order);
        let rows: Vec<Vec<f64>> = dirs.iter().map(|d| basis_row(order, d)).collect();
        let mut a = vec![vec![0.0; r + 1]; r];
        for (row, s) in rows.iter().zip(signal) {
            for i in 0..r {
                for j in 0..r {
                    a[i][j] += row[i] * row[j];
                }
                a[i][r] += row[i] * s;
            }
        }
        for col in 0..r {
            let piv = (col..r).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for row in 0..r {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for c in col..=r {
                        a[row][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..r).map(|i| a[i][r] / a[i][i]).collect()
    }

    #[test]
    fn noisy_fit_matches_normal_equations() {
        let g = Sphere::fibonacci(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let signal: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let fit = sh_fit(&signal, g.directions(), 6).unwrap();
        let oracle = normal_equations_fit(&signal, g.directions(), 6);
        for (a, b) in fit.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn dc_coefficient_samples_to_one() {
        let mut c = vec![0.0; 15];
        c[0] = (4.0 * PI).sqrt();
        let dirs = Sphere::fibonacci(30).unwrap();
        for v in sh_sample(&c, dirs.directions()).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn even_basis_is_antipodally_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c: Vec<f64> = (0..45).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dirs = Sphere::fibonacci(25).unwrap().directions().to_vec();
        let neg: Vec<Vec3> = dirs.iter().map(|d| -d).collect();
        let a = sh_sample(&c, &dirs).unwrap();
        let b = sh_sample(&c, &neg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        // Dense Fibonacci sampling approximates the surface integral.
        let n = 20000;
        let dirs = Sphere::fibonacci(n).unwrap();
        let b = basis_matrix(4, dirs.directions());
        let gram = b.transpose() * &b * (4.0 * PI / n as f64);
        for i in 0..15 {
            for j in 0..15 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-3, "({i},{j}) = {}", gram[(i, j)]);
            }
        }
    }

    #[test]
    fn errors() {
        let g = Sphere::fibonacci(10).unwrap();
        assert!(sh_fit(&[0.0; 10], g.directions(), 4).is_err());
        assert!(sh_fit(&[0.0; 10], g.directions(), 3).is_err());
        assert!(sh_sample(&[0.0; 7], g.directions()).is_err());
    }
}
