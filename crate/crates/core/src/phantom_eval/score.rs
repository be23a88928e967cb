use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;

use super::GroundTruth;
use crate::streamline::{Streamline, Tractogram};
use crate::volume::{apply_affine, invert_affine, ScalarMap};
use crate::{Affine, Error, Result, Vec3};

/// Sampling interval along segments, in voxels.
const RASTER_STEP: f64 = 0.25;

/// Voxels visited by a streamline: each segment is sampled every quarter
/// voxel and every sample is rounded to its nearest voxel. Samples outside
/// the grid are dropped. Output is sorted and unique.
pub fn rasterize(s: &Streamline, affine: &Affine, dims: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let inv = invert_affine(affine)?;
    let vox: Vec<Vec3> = s.points.iter().map(|p| apply_affine(&inv, p)).collect();
    let mut out = BTreeSet::new();
    let mut visit = |v: Vec3| {
        let r = [v.x, v.y, v.z].map(|c| (c + 0.5).floor());
        if (0..3).all(|a| r[a] >= 0.0 && r[a] < dims[a] as f64) {
            out.insert(r.map(|c| c as usize));
        }
    };
    if let Some(first) = vox.first() {
        visit(*first);
    }
    for w in vox.windows(2) {
        let d = w[1] - w[0];
        let n = (d.norm() / RASTER_STEP).ceil().max(1.0) as usize;
        for i in 1..=n {
            visit(w[0] + d * (i as f64 / n as f64));
        }
    }
    Ok(out.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleMetrics {
    pub name: String,
    pub valid: usize,
    pub ol: f64,
    pub or: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub streamlines: usize,
    pub vc: f64,
    pub ol: f64,
    pub or: f64,
    pub f1: f64,
    pub bundles: Vec<BundleMetrics>,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "streamlines={}", self.streamlines)?;
        writeln!(f, "VC={:.4}", self.vc)?;
        writeln!(f, "OL={:.4}", self.ol)?;
        writeln!(f, "OR={:.4}", self.or)?;
        write!(f, "F1={:.4}", self.f1)?;
        for b in &self.bundles {
            write!(f, "\n{}.valid={}\n{0}.OL={:.4}\n{0}.OR={:.4}\n{0}.F1={:.4}", b.name, b.valid, b.ol, b.or, b.f1)?;
        }
        Ok(())
    }
}

fn inside(map: &ScalarMap, p: Option<&Vec3>) -> bool {
    p.and_then(|p| map.value_at(p)).is_some_and(|v| v > 0.0)
}

/// Index of the first bundle whose head and tail regions hold the two
/// endpoints, in either order.
fn assign(s: &Streamline, gt: &GroundTruth) -> Option<usize> {
    gt.bundles.iter().position(|b| {
        let (a, z) = (s.first(), s.last());
        (inside(&b.head, a) && inside(&b.tail, z)) || (inside(&b.tail, a) && inside(&b.head, z))
    })
}

/// Valid-connection rate over all candidates, then overlap, overreach and
/// F1 per bundle from the voxels its valid streamlines cover.
pub fn score_tractogram(candidate: &Tractogram, gt: &GroundTruth) -> Result<Metrics> {
    if candidate.is_empty() {
        return Err(Error::EmptyTractogram);
    }
    if gt.bundles.is_empty() {
        return Err(Error::invalid("ground truth has no bundles"));
    }
    let mask0 = &gt.bundles[0].mask;
    let (affine, dims) = (*mask0.affine(), mask0.dims());
    let assigned: Vec<Option<(usize, Vec<[usize; 3]>)>> = candidate
        .streamlines
        .par_iter()
        .map(|s| assign(s, gt).map(|b| rasterize(s, &affine, dims).map(|v| (b, v))).transpose())
        .collect::<Result<_>>()?;

    let mut covered = vec![BTreeSet::new(); gt.bundles.len()];
    let mut valid = vec![0usize; gt.bundles.len()];
    for (b, voxels) in assigned.iter().flatten() {
        valid[*b] += 1;
        covered[*b].extend(voxels.iter().copied());
    }

    let bundles: Vec<BundleMetrics> = gt
        .bundles
        .iter()
        .zip(covered.iter().zip(&valid))
        .map(|(b, (cov, &valid))| {
            let gt_count = b.mask.data().iter().filter(|v| **v > 0.0).count();
            let hit = cov.iter().filter(|[i, j, k]| b.mask.get(*i, *j, *k) > 0.0).count();
            let miss = cov.len() - hit;
            let (ol, or) = if gt_count == 0 { (0.0, 0.0) } else { (hit as f64 / gt_count as f64, miss as f64 / gt_count as f64) };
            let precision = if cov.is_empty() { 0.0 } else { hit as f64 / cov.len() as f64 };
            let f1 = if precision + ol > 0.0 { 2.0 * precision * ol / (precision + ol) } else { 0.0 };
            BundleMetrics { name: b.name.clone(), valid, ol: 100.0 * ol, or: 100.0 * or, f1: 100.0 * f1 }
        })
        .collect();

    let n = bundles.len() as f64;
    let mean = |f: fn(&BundleMetrics) -> f64| bundles.iter().map(f).sum::<f64>() / n;
    Ok(Metrics {
        streamlines: candidate.len(),
        vc: 100.0 * valid.iter().sum::<usize>() as f64 / candidate.len() as f64,
        ol: mean(|b| b.ol),
        or: mean(|b| b.or),
        f1: mean(|b| b.f1),
        bundles,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::phantom_eval::{generate_phantom, BundleGroundTruth, PhantomSpec};
    use crate::volume::MapKind;

    fn line(pts: &[[f64; 3]]) -> Streamline {
        Streamline::new(pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }

    fn map(dims: [usize; 3], on: &[[usize; 3]]) -> ScalarMap {
        let mut d = vec![0.0; dims.iter().product()];
        for [i, j, k] in on {
            d[(k * dims[1] + j) * dims[0] + i] = 1.0;
        }
        ScalarMap::new(dims, d, Affine::identity(), MapKind::WhiteMatterMask).unwrap()
    }

    /// Two bundles on a 6x4x1 grid: row y=0 and row y=2, each x=0..=4,
    /// with single-voxel head (x=0) and tail (x=4) regions.
    fn toy() -> GroundTruth {
        let dims = [6, 4, 1];
        let row = |y: usize| (0..5).map(|x| [x, y, 0]).collect::<Vec<_>>();
        let bundle = |name: &str, y: usize| BundleGroundTruth {
            name: name.into(),
            mask: map(dims, &row(y)),
            head: map(dims, &[[0, y, 0]]),
            tail: map(dims, &[[4, y, 0]]),
            streamlines: Tractogram::new(vec![line(&[[0.0, y as f64, 0.0], [4.0, y as f64, 0.0]])]),
        };
        GroundTruth { bundles: vec![bundle("a", 0), bundle("b", 2)] }
    }

    #[test]
    fn rasterize_counts_each_voxel_once() {
        let v = rasterize(&line(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), &Affine::identity(), [4, 1, 1]).unwrap();
        assert_eq!(v, vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let v = rasterize(&line(&[[-2.0, 0.0, 0.0], [0.2, 0.0, 0.0]]), &Affine::identity(), [4, 1, 1]).unwrap();
        assert_eq!(v, vec![[0, 0, 0]]);
    }

    #[test]
    fn hand_counted_toy_case() {
        let gt = toy();
        let cands = Tractogram::new(vec![
            // Valid for a, covers x=0..=4 at y=0 and strays through (2,1).
            line(&[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [4.0, 0.0, 0.0]]),
            // Valid for a, reversed direction along the row.
            line(&[[4.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
            // Both ends in b's head: not valid.
            line(&[[0.0, 2.0, 0.0], [0.4, 2.0, 0.0]]),
            // Ends in a's head and b's tail: not valid.
            line(&[[0.0, 0.0, 0.0], [4.0, 2.0, 0.0]]),
        ]);
        let m = score_tractogram(&cands, &gt).unwrap();
        // Candidate 0 visits (0,0) (1,0) (1,1) (2,1) (3,1) (3,0) (4,0) after
        // rounding; candidate 1 adds (2,0). Covered = 8, of which 5 are GT.
        assert_eq!(m.vc, 50.0);
        let a = &m.bundles[0];
        assert_eq!(a.valid, 2);
        assert_eq!(a.ol, 100.0);
        assert!((a.or - 60.0).abs() < 1e-12);
        let p = 5.0 / 8.0;
        assert!((a.f1 - 100.0 * 2.0 * p / (p + 1.0)).abs() < 1e-12);
        let b = &m.bundles[1];
        assert_eq!((b.valid, b.ol, b.or, b.f1), (0, 0.0, 0.0, 0.0));
        assert!((m.ol - 50.0).abs() < 1e-12);
        assert!((m.or - 30.0).abs() < 1e-12);
    }

    #[test]
    fn partial_coverage() {
        let gt = toy();
        // Short valid streamline would need both ends in ROIs, so use a bent
        // one that skips (1..3, 0) by detouring through y=1.
        let s = line(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [4.0, 1.0, 0.0], [4.0, 0.0, 0.0]]);
        let m = score_tractogram(&Tractogram::new(vec![s]), &gt).unwrap();
        let a = &m.bundles[0];
        assert!((a.ol - 40.0).abs() < 1e-12);
        assert!((a.or - 100.0).abs() < 1e-12);
        let p = 2.0 / 7.0;
        assert!((a.f1 - 100.0 * 2.0 * p * 0.4 / (p + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn same_roi_is_not_valid() {
        let gt = toy();
        let m = score_tractogram(&Tractogram::new(vec![line(&[[4.0, 0.0, 0.0], [3.8, 0.0, 0.0]])]), &gt).unwrap();
        assert_eq!(m.vc, 0.0);
    }

    #[test]
    fn empty_candidate_is_an_error() {
        assert!(matches!(score_tractogram(&Tractogram::default(), &toy()), Err(Error::EmptyTractogram)));
    }

    #[test]
    fn reference_scores_perfectly() {
        let ph = generate_phantom(&PhantomSpec::default()).unwrap();
        let m = score_tractogram(&ph.ground_truth.reference(), &ph.ground_truth).unwrap();
        assert_eq!((m.vc, m.ol, m.or, m.f1), (100.0, 100.0, 0.0, 100.0), "{m}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn permutation_invariant(
            pts in prop::collection::vec(prop::collection::vec((-1.0..6.0f64, -1.0..4.0f64), 2..5), 1..8),
            seed in any::<u64>(),
        ) {
            let gt = toy();
            let lines: Vec<Streamline> = pts
                .iter()
                .map(|s| Streamline::new(s.iter().map(|(x, y)| Vec3::new(*x, *y, 0.0)).collect()))
                .collect();
            let mut shuffled = lines.clone();
            let n = shuffled.len();
            for i in 0..n {
                shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n);
            }
            let a = score_tractogram(&Tractogram::new(lines), &gt).unwrap();
            let b = score_tractogram(&Tractogram::new(shuffled), &gt).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((0.0..=100.0).contains(&a.vc) && (0.0..=100.0).contains(&a.ol));
            prop_assert!(a.or >= 0.0 && (0.0..=100.0).contains(&a.f1));
            for bm in &a.bundles {
                let perfect = bm.ol == 100.0 && bm.or == 0.0;
                prop_assert_eq!(bm.f1 == 100.0, perfect);
            }
        }
    }
}
