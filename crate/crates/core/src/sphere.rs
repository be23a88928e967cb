//! Direction classes on the unit sphere and Gaussian soft labels.
//!
//! The model predicts a distribution over `K` fixed unit directions plus one
//! end-of-fiber (EoF) class, stored last. Directions come from a Fibonacci
//! lattice so that the class space is reproducible for any `K`.

use std::f64::consts::PI;

use crate::{Error, Result, Vec3};

/// Norm tolerance for vectors handed to the angular routines.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// `K` deterministic, near-uniform unit directions covering the full sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    directions: Vec<Vec3>,
}

impl Sphere {
    /// Fibonacci lattice with `z_i = 1 - (2i + 1) / k` and golden-angle azimuth.
    pub fn fibonacci(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("sphere needs at least 2 directions, got {k}")));
        }
        let golden_angle = PI * (3.0 - 5f64.sqrt());
        let directions = (0..k)
            .map(|i| {
                let z = 1.0 - (2 * i + 1) as f64 / k as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden_angle * i as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z).normalize()
            })
            .collect();
        Ok(Self { directions })
    }

    /// Builds a sphere from explicit directions. Each must be unit-norm and
    /// no two may coincide.
    pub fn from_directions(directions: Vec<Vec3>) -> Result<Self> {
        if directions.len() < 2 {
            return Err(Error::invalid("sphere needs at least 2 directions"));
        }
        for (i, d) in directions.iter().enumerate() {
            check_unit(d)?;
            if directions[..i].iter().any(|o| o == d) {
                return Err(Error::invalid(format!("direction {i} is duplicated")));
            }
        }
        Ok(Self { directions })
    }

    /// The six signed coordinate axes `+x, -x, +y, -y, +z, -z`.
    pub fn axes() -> Self {
        let directions = vec![
            Vec3::x(),
            -Vec3::x(),
            Vec3::y(),
            -Vec3::y(),
            Vec3::z(),
            -Vec3::z(),
        ];
        Self { directions }
    }

    pub fn k(&self) -> usize {
        self.directions.len()
    }

    /// Index of the EoF class in a label vector.
    pub fn eof_index(&self) -> usize {
        self.directions.len()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn direction(&self, class: usize) -> Vec3 {
        self.directions[class]
    }

    /// Class whose direction is angularly closest to `theta`; lowest index wins ties.
    pub fn nearest_class(&self, theta: &Vec3) -> usize {
        // Maximal dot product is minimal angle; acos is monotone.
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, d) in self.directions.iter().enumerate() {
            let dot = d.dot(theta).clamp(-1.0, 1.0);
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        best
    }

    /// Gaussian soft label over the direction classes; EoF mass is zero.
    pub fn smooth_label(&self, theta: &Vec3, cfg: &SmoothingConfig) -> Result<SoftLabel> {
        check_unit(theta)?;
        let two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;
        let mut probs: Vec<f64> = self
            .directions
            .iter()
            .map(|a| {
                let d = unchecked_angle(theta, a);
                (-d * d / two_sigma_sq).exp()
            })
            .collect();
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            // Every weight underflowed: fall back to the hard label.
            return Ok(self.one_hot(self.nearest_class(theta)));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        probs.push(0.0);
        Ok(SoftLabel(probs))
    }

    /// One-hot label at `class` (which may be the EoF index).
    pub fn one_hot(&self, class: usize) -> SoftLabel {
        SoftLabel::one_hot(self.k() + 1, class)
    }

    /// Hard label at the nearest direction class.
    pub fn hard_label(&self, theta: &Vec3) -> Result<SoftLabel> {
        check_unit(theta)?;
        Ok(self.one_hot(self.nearest_class(theta)))
    }

    pub fn eof_label(&self) -> SoftLabel {
        self.one_hot(self.eof_index())
    }
}

/// Angular standard deviation of the label kernel, in radians.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
}

impl SmoothingConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        let cfg = Self { sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { sigma: 0.1 }
    }
}

/// Probability vector over `K + 1` classes; the last class is EoF.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    /// Wraps a probability vector, checking non-negativity and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("label entries must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("label sums to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn one_hot(len: usize, class: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[class] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn eof_mass(&self) -> f64 {
        *self.0.last().unwrap_or(&0.0)
    }

    /// Index of the largest entry; lowest index on exact ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// One-hot EoF label for a sphere of `k` directions.
pub fn eof_label(k: usize) -> Result<SoftLabel> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    Ok(SoftLabel::one_hot(k + 1, k))
}

/// Angle between two unit vectors in `[0, pi]`.
pub fn angular_distance(u: &Vec3, v: &Vec3) -> Result<f64> {
    check_unit(u)?;
    check_unit(v)?;
    Ok(unchecked_angle(u, v))
}

pub(crate) fn unchecked_angle(u: &Vec3, v: &Vec3) -> f64 {
    u.dot(v).clamp(-1.0, 1.0).acos()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_unit(v: &Vec3) -> Result<()> {
    let n = v.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!("expected a unit vector, got norm {n}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z).normalize()
    }

    // Exhaustive O(K^2) scan; frozen below as a regression constant.
    fn min_pairwise_angle(s: &Sphere) -> f64 {
        let d = s.directions();
        let mut best = f64::INFINITY;
        for i in 0..d.len() {
            for j in (i + 1)..d.len() {
                best = best.min(d[i].dot(&d[j]).clamp(-1.0, 1.0).acos());
            }
        }
        best
    }

    #[test]
    fn fibonacci_724_is_unit_and_distinct() {
        let s = Sphere::fibonacci(724).unwrap();
        assert_eq!(s.k(), 724);
        for d in s.directions() {
            assert!((d.norm() - 1.0).abs() < 1e-9);
        }
        let min = min_pairwise_angle(&s);
        assert!(min > 0.0);
        assert!((min - FIB724_MIN_ANGLE).abs() < 1e-12, "min angle {min:.17}");
    }

    const FIB724_MIN_ANGLE: f64 = 0.114_969_906_219_074_8;

    #[test]
    fn fibonacci_two_points() {
        let s = Sphere::fibonacci(2).unwrap();
        assert!((s.direction(0).z - 0.5).abs() < 1e-15);
        assert!((s.direction(1).z + 0.5).abs() < 1e-15);
    }

    #[test]
    fn fibonacci_rejects_small_k() {
        assert!(matches!(Sphere::fibonacci(1), Err(Error::InvalidArgument(_))));
        assert!(matches!(Sphere::fibonacci(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fibonacci_is_bit_deterministic() {
        assert_eq!(Sphere::fibonacci(724).unwrap(), Sphere::fibonacci(724).unwrap());
    }

    #[test]
    fn angular_distance_cases() {
        let x = Vec3::x();
        assert_eq!(angular_distance(&x, &x).unwrap(), 0.0);
        assert!((angular_distance(&x, &Vec3::y()).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((angular_distance(&x, &-x).unwrap() - PI).abs() < 1e-15);
        assert!(angular_distance(&x, &Vec3::new(2.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn smooth_label_on_axis_sphere_matches_hand_evaluation() {
        let s = Sphere::axes();
        let cfg = SmoothingConfig::new(0.1).unwrap();
        let label = s.smooth_label(&Vec3::x(), &cfg).unwrap();
        // w = exp(-d^2 / (2 sigma^2)) at d = 0, pi/2 (x4), pi.
        let w0 = 1.0;
        let w90 = (-(PI / 2.0).powi(2) / 0.02).exp();
        let w180 = (-(PI).powi(2) / 0.02).exp();
        let total = w0 + 4.0 * w90 + w180;
        let expect = [w0 / total, w180 / total, w90 / total, w90 / total, w90 / total, w90 / total, 0.0];
        for (got, want) in label.probs().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        assert_eq!(label.argmax(), 0);
    }

    #[test]
    fn smooth_label_peaks_at_matching_direction() {
        let s = Sphere::fibonacci(724).unwrap();
        let label = s.smooth_label(&s.direction(0), &SmoothingConfig::default()).unwrap();
        assert_eq!(label.argmax(), 0);
        assert_eq!(label.eof_mass(), 0.0);
    }

    #[test]
    fn narrow_sigma_concentrates_mass() {
        let s = Sphere::fibonacci(724).unwrap();
        let cfg = SmoothingConfig::new(0.01).unwrap();
        for class in [0, 100, 361, 723] {
            let label = s.smooth_label(&s.direction(class), &cfg).unwrap();
            assert!(label.probs()[class] > 0.99);
        }
    }

    #[test]
    fn eof_label_is_one_hot_last() {
        let l = eof_label(724).unwrap();
        assert_eq!(l.len(), 725);
        assert_eq!(l.probs()[724], 1.0);
        assert_eq!(l.probs().iter().sum::<f64>(), 1.0);
        assert_eq!(l.argmax(), 724);
        assert!(eof_label(1).is_err());
    }

    #[test]
    fn nearest_class_cases() {
        let s = Sphere::fibonacci(724).unwrap();
        assert_eq!(s.nearest_class(&s.direction(5)), 5);
        let axes = Sphere::axes();
        assert_eq!(axes.nearest_class(&unit(0.9, 0.1, 0.0)), 0);
    }

    #[test]
    fn smoothing_config_rejects_non_positive() {
        assert!(SmoothingConfig::new(0.0).is_err());
        assert!(SmoothingConfig::new(-1.0).is_err());
    }

    fn linear_scan_nearest(s: &Sphere, theta: &Vec3) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, d) in s.directions().iter().enumerate() {
            let a = angular_distance(theta, d).unwrap();
            if a < best.0 {
                best = (a, i);
            }
        }
        best.1
    }

    fn arb_unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 1e-4)
            .prop_map(|(x, y, z)| unit(x, y, z))
    }

    proptest! {
        #[test]
        fn smooth_label_is_a_distribution_peaked_at_nearest(theta in arb_unit()) {
            let s = Sphere::fibonacci(200).unwrap();
            let label = s.smooth_label(&theta, &SmoothingConfig::default()).unwrap();
            let total: f64 = label.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(label.probs().iter().all(|p| *p >= 0.0));
            prop_assert_eq!(label.argmax(), s.nearest_class(&theta));
            prop_assert_eq!(s.nearest_class(&theta), linear_scan_nearest(&s, &theta));
        }

        #[test]
        fn angular_distance_is_a_metric(a in arb_unit(), b in arb_unit(), c in arb_unit()) {
            let ab = angular_distance(&a, &b).unwrap();
            let ba = angular_distance(&b, &a).unwrap();
            let bc = angular_distance(&b, &c).unwrap();
            let ac = angular_distance(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn smooth_label_is_relabeling_equivariant(theta in arb_unit(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let s = Sphere::fibonacci(50).unwrap();
            let mut perm: Vec<usize> = (0..50).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted = Sphere::from_directions(perm.iter().map(|&i| s.direction(i)).collect()).unwrap();
            let cfg = SmoothingConfig::default();
            let base = s.smooth_label(&theta, &cfg).unwrap();
            let relabeled = permuted.smooth_label(&theta, &cfg).unwrap();
            for (new_idx, &old_idx) in perm.iter().enumerate() {
                prop_assert!((relabeled.probs()[new_idx] - base.probs()[old_idx]).abs() < 1e-15);
            }
        }
    }
}
