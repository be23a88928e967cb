//! Synthetic tube-bundle phantoms with known ground truth, and
//! Tractometer-style scoring against that ground truth.

mod io;
mod score;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sphere::Sphere;
use crate::streamline::{resample_streamline, Streamline, Tractogram};
use crate::train::derive_seed;
use crate::volume::dti::{fa_from_eigenvalues, fa_from_tensor};
use crate::volume::{DwiVolume, MapKind, ScalarMap};
use crate::{Affine, Error, Result, Vec3};
pub use io::{read_ground_truth, write_ground_truth};
pub use score::{rasterize, score_tractogram, BundleMetrics, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub name: String,
    /// Polyline vertices in millimetres.
    pub centerline: Vec<[f64; 3]>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub bundles: Vec<BundleSpec>,
    pub lambda_par: f64,
    pub lambda_perp: f64,
    pub bvalue: f64,
    pub n_gradients: usize,
    pub n_b0: usize,
    pub s0: f64,
    /// Rician noise sigma in signal units; 0 disables noise.
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Point spacing of the reference streamlines, millimetres.
    pub step_size: f64,
    /// Cross-section spacing of reference streamlines, millimetres.
    pub streamline_spacing: f64,
    /// Arc length of each endpoint region, millimetres.
    pub roi_length: f64,
}

fn arc(center: [f64; 2], radius: f64, z: f64, vertices: usize) -> Vec<[f64; 3]> {
    (0..vertices)
        .map(|i| {
            let t = 0.5 * PI * i as f64 / (vertices - 1) as f64;
            [center[0] + radius * t.cos(), center[1] + radius * t.sin(), z]
        })
        .collect()
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let bundle = |name: &str, centerline: Vec<[f64; 3]>| BundleSpec { name: name.into(), centerline, radius: 3.0 };
        Self {
            dims: [32, 32, 32],
            voxel_size: 1.0,
            bundles: vec![
                bundle("straight", vec![[2.0, 6.0, 6.0], [29.0, 6.0, 6.0]]),
                bundle("arc", arc([4.0, 4.0], 20.0, 25.0, 91)),
                bundle("cross_x", vec![[2.0, 20.0, 15.0], [29.0, 20.0, 15.0]]),
                bundle("cross_y", vec![[20.0, 2.0, 15.0], [20.0, 29.0, 15.0]]),
            ],
            lambda_par: 1.7e-3,
            lambda_perp: 0.3e-3,
            bvalue: 1000.0,
            n_gradients: 32,
            n_b0: 1,
            s0: 100.0,
            noise_sigma: 0.0,
            rng_seed: 0,
            step_size: 1.0,
            streamline_spacing: 0.7,
            roi_length: 3.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| *d < 3) {
            return Err(Error::invalid(format!("phantom grid {:?} is too small", self.dims)));
        }
        let positive = [
            ("voxel_size", self.voxel_size),
            ("bvalue", self.bvalue),
            ("s0", self.s0),
            ("step_size", self.step_size),
            ("streamline_spacing", self.streamline_spacing),
            ("roi_length", self.roi_length),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
        if !(self.lambda_par > self.lambda_perp && self.lambda_perp > 0.0) {
            return Err(Error::invalid("eigenvalues must satisfy lambda_par > lambda_perp > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if self.n_gradients < 6 {
            return Err(Error::invalid("at least 6 gradient directions are needed"));
        }
        if self.bundles.is_empty() {
            return Err(Error::invalid("phantom needs at least one bundle"));
        }
        let extent = self.dims.map(|d| (d - 1) as f64 * self.voxel_size);
        for b in &self.bundles {
            if !(b.radius > 0.0) {
                return Err(Error::invalid(format!("bundle {} radius must be positive", b.name)));
            }
            if b.centerline.len() < 2 {
                return Err(Error::invalid(format!("bundle {} needs at least 2 centreline points", b.name)));
            }
            if b.name.is_empty() || b.name.contains(|c: char| c.is_whitespace() || c == '/') {
                return Err(Error::invalid(format!("bundle name {:?} must be a non-empty word", b.name)));
            }
            // The tube cross-section at each vertex is a disc normal to the
            // adjacent segments; its reach along axis a is r sqrt(1 - t_a^2).
            for w in b.centerline.windows(2) {
                let t = (Vec3::from(w[1]) - Vec3::from(w[0])).normalize();
                for p in w {
                    let fits = (0..3).all(|a| {
                        let reach = b.radius * (1.0 - t[a] * t[a]).max(0.0).sqrt();
                        p[a] - reach >= 0.0 && p[a] + reach <= extent[a]
                    });
                    if !fits || t.iter().any(|c| !c.is_finite()) {
                        return Err(Error::invalid(format!("bundle {} reaches the grid boundary at {p:?}", b.name)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn affine(&self) -> Affine {
        let mut a = Affine::new_scaling(self.voxel_size);
        a[(3, 3)] = 1.0;
        a
    }

    /// `n_b0` zero vectors followed by `n_gradients` Fibonacci directions.
    pub fn gradient_table(&self) -> Result<(Vec<Vec3>, Vec<f64>)> {
        let dirs = Sphere::fibonacci(self.n_gradients)?;
        let mut g = vec![Vec3::zeros(); self.n_b0];
        g.extend_from_slice(dirs.directions());
        let mut b = vec![0.0; self.n_b0];
        b.extend(std::iter::repeat_n(self.bvalue, self.n_gradients));
        Ok((g, b))
    }
}

/// Ground truth for one bundle. Masks live on the phantom grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGroundTruth {
    pub name: String,
    pub mask: ScalarMap,
    pub head: ScalarMap,
    pub tail: ScalarMap,
    pub streamlines: Tractogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bundles: Vec<BundleGroundTruth>,
}

impl GroundTruth {
    /// All reference streamlines, bundle by bundle.
    pub fn reference(&self) -> Tractogram {
        Tractogram::new(self.bundles.iter().flat_map(|b| b.streamlines.streamlines.iter().cloned()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: DwiVolume,
    pub wm_mask: ScalarMap,
    pub fa_map: ScalarMap,
    pub ground_truth: GroundTruth,
}

/// `s0 exp(-b g^T D g)` for `D = lp I + (la - lp) t t^T`.
pub fn tensor_signal(s0: f64, b: f64, lambda_par: f64, lambda_perp: f64, tangent: &Vec3, g: &Vec3) -> f64 {
    let c = tangent.dot(g);
    let adc = lambda_perp * g.norm_squared() + (lambda_par - lambda_perp) * c * c;
    s0 * (-b * adc).exp()
}

/// Closest-point query against a polyline, with flat end caps extended by
/// `overshoot` along the end tangents.
struct Centerline {
    points: Vec<Vec3>,
    cumulative: Vec<f64>,
}

struct Projection {
    distance: f64,
    arc: f64,
    tangent: Vec3,
}

impl Centerline {
    fn new(points: Vec<Vec3>) -> Self {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
        }
        Self { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn project(&self, p: &Vec3, overshoot: f64) -> Option<Projection> {
        let last = self.points.len() - 2;
        let mut best: Option<Projection> = None;
        for j in 0..=last {
            let (a, b) = (self.points[j], self.points[j + 1]);
            let d = b - a;
            let len = d.norm();
            if len == 0.0 {
                continue;
            }
            let t = d / len;
            let raw = (p - a).dot(&t);
            if (j == 0 && raw < -overshoot) || (j == last && raw > len + overshoot) {
                continue;
            }
            // Flat caps: the end segments extend past the polyline ends.
            let lo = if j == 0 { -overshoot } else { 0.0 };
            let hi = if j == last { len + overshoot } else { len };
            let s = raw.clamp(lo, hi);
            let q = a + t * s;
            let dist = (p - q).norm();
            if best.as_ref().is_none_or(|b| dist < b.distance) {
                best = Some(Projection { distance: dist, arc: self.cumulative[j] + s, tangent: t });
            }
        }
        best
    }

    /// Rotation-minimising frame normals at each vertex.
    fn frames(&self) -> Vec<(Vec3, Vec3)> {
        let n = self.points.len();
        let tangent = |i: usize| {
            let (a, b) = if i + 1 < n { (self.points[i], self.points[i + 1]) } else { (self.points[i - 1], self.points[i]) };
            (b - a).normalize()
        };
        let t0 = tangent(0);
        let helper = if t0.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let mut u = (helper - t0 * helper.dot(&t0)).normalize();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let t = tangent(i);
            u = (u - t * u.dot(&t)).normalize();
            out.push((u, t.cross(&u)));
        }
        out
    }
}

fn voxel_center(spec: &PhantomSpec, i: usize, j: usize, k: usize) -> Vec3 {
    Vec3::new(i as f64, j as f64, k as f64) * spec.voxel_size
}

/// Candidate reference streamlines: parallel offsets of the centreline on a
/// square lattice covering the tube cross-section.
fn reference_streamlines(spec: &PhantomSpec, line: &Centerline, radius: f64) -> Result<Vec<Streamline>> {
    let frames = line.frames();
    let reach = radius;
    let h = spec.streamline_spacing;
    let steps = (reach / h).floor() as i64;
    let mut out = Vec::new();
    for a in -steps..=steps {
        for b in -steps..=steps {
            let (du, dv) = (a as f64 * h, b as f64 * h);
            if du * du + dv * dv > reach * reach + 1e-12 {
                continue;
            }
            let pts = line.points.iter().zip(&frames).map(|(p, (u, v))| p + u * du + v * dv).collect();
            let mut s = resample_streamline(&Streamline::new(pts), spec.step_size)?;
            // Store at TCK precision so the masks match what a reader sees.
            s.points.iter_mut().for_each(|p| *p = p.map(|c| c as f32 as f64));
            out.push(s);
        }
    }
    Ok(out)
}

fn mask_map(spec: &PhantomSpec, data: Vec<bool>) -> Result<ScalarMap> {
    let data = data.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
    ScalarMap::new(spec.dims, data, spec.affine(), MapKind::WhiteMatterMask)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let n_vox = nx * ny * nz;
    let affine = spec.affine();
    let (grads, bvals) = spec.gradient_table()?;
    let lines: Vec<Centerline> = spec
        .bundles
        .iter()
        .map(|b| Centerline::new(b.centerline.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()))
        .collect();
    let overshoot = 0.5 * 3f64.sqrt() * spec.voxel_size;

    // Per voxel: (bundle, arc position, tangent) for every containing tube.
    let members: Vec<Vec<(usize, f64, Vec3)>> = (0..n_vox)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let c = voxel_center(spec, i, j, k);
            let mut m = Vec::new();
            for (b, (line, bs)) in lines.iter().zip(&spec.bundles).enumerate() {
                if let Some(p) = line.project(&c, overshoot) {
                    if p.distance <= bs.radius {
                        m.push((b, p.arc, p.tangent));
                    }
                }
            }
            m
        })
        .collect();

    let mean_l = (spec.lambda_par + 2.0 * spec.lambda_perp) / 3.0;
    let g = grads.len();
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma)).transpose().map_err(|e| Error::invalid(e.to_string()))?;
    let signal: Vec<Vec<f64>> = members
        .par_iter()
        .enumerate()
        .map(|(idx, m)| {
            let mut s: Vec<f64> = (0..g)
                .map(|c| {
                    if bvals[c] <= crate::volume::B0_THRESHOLD {
                        return spec.s0;
                    }
                    if m.is_empty() {
                        return spec.s0 * (-bvals[c] * mean_l).exp();
                    }
                    m.iter()
                        .map(|(_, _, t)| tensor_signal(spec.s0, bvals[c], spec.lambda_par, spec.lambda_perp, t, &grads[c]))
                        .sum::<f64>()
                        / m.len() as f64
                })
                .collect();
            if let Some(n) = &noise {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.rng_seed, idx as u64]));
                for v in &mut s {
                    let (re, im) = (*v + n.sample(&mut rng), n.sample(&mut rng));
                    *v = (re * re + im * im).sqrt();
                }
            }
            s
        })
        .collect();
    let volume = DwiVolume::new(spec.dims, signal.concat(), affine, grads, bvals)?;

    let single_fa = fa_from_eigenvalues([spec.lambda_par, spec.lambda_perp, spec.lambda_perp]);
    let fa: Vec<f64> = members
        .iter()
        .map(|m| match m.len() {
            0 => 0.0,
            1 => single_fa,
            _ => {
                let mut d = nalgebra::Matrix3::zeros();
                for (_, _, t) in m {
                    d += nalgebra::Matrix3::identity() * spec.lambda_perp + t * t.transpose() * (spec.lambda_par - spec.lambda_perp);
                }
                fa_from_tensor(&(d / m.len() as f64)).clamp(0.0, 1.0)
            }
        })
        .collect();
    let fa_map = ScalarMap::new(spec.dims, fa, affine, MapKind::Fa)?;
    let wm_mask = mask_map(spec, members.iter().map(|m| !m.is_empty()).collect())?;

    let mut bundles = Vec::with_capacity(spec.bundles.len());
    for (b, (bs, line)) in spec.bundles.iter().zip(&lines).enumerate() {
        let in_tube = |[i, j, k]: [usize; 3]| members[(k * ny + j) * nx + i].iter().any(|e| e.0 == b);
        // Keep offsets whose every visited voxel lies in this tube, so the
        // ground truth stays inside the white-matter mask.
        let mut streamlines = Vec::new();
        let mut gt = vec![false; n_vox];
        for s in reference_streamlines(spec, line, bs.radius)? {
            let voxels = rasterize(&s, &affine, spec.dims)?;
            if voxels.iter().all(|v| in_tube(*v)) {
                for [i, j, k] in voxels {
                    gt[(k * ny + j) * nx + i] = true;
                }
                streamlines.push(s);
            }
        }
        if streamlines.is_empty() {
            return Err(Error::invalid(format!("bundle {} is too thin for any reference streamline", bs.name)));
        }
        let streamlines = Tractogram::new(streamlines);
        let len = line.length();
        let arc_of = |m: &Vec<(usize, f64, Vec3)>| m.iter().find(|e| e.0 == b).map(|e| e.1);
        let head = members.iter().map(|m| arc_of(m).is_some_and(|a| a <= spec.roi_length)).collect();
        let tail = members.iter().map(|m| arc_of(m).is_some_and(|a| a >= len - spec.roi_length)).collect();
        bundles.push(BundleGroundTruth {
            name: bs.name.clone(),
            mask: mask_map(spec, gt)?,
            head: mask_map(spec, head)?,
            tail: mask_map(spec, tail)?,
            streamlines,
        });
    }
    Ok(Phantom { volume, wm_mask, fa_map, ground_truth: GroundTruth { bundles } })
}
