//! Streamlines, tractograms and the geometry used to turn them into
//! supervision targets.

pub mod tck;

use std::ops::Range;

use crate::sphere::{SmoothingConfig, SoftLabel, Sphere};
use crate::{Error, Result, Vec3};

pub use tck::{read_tck, write_tck};

/// Ordered RAS points in millimetres.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Streamline {
    pub points: Vec<Vec3>,
}

impl Streamline {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Option<&Vec3> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&Vec3> {
        self.points.last()
    }

    /// Sum of segment lengths.
    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn reversed(&self) -> Self {
        Self { points: self.points.iter().rev().copied().collect() }
    }
}

/// Collection of streamlines in RAS millimetre space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Self {
        Self { streamlines }
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.streamlines.iter().map(Streamline::len).sum()
    }
}

pub fn reverse_streamline(s: &Streamline) -> Streamline {
    s.reversed()
}

/// Walks the polyline emitting points whose chord distance to the previous
/// output point is exactly `step`, then appends the original endpoint when it
/// is not already the last output.
// `segment` changes only right before `continue 'walk` restarts the scan.
#[allow(clippy::mut_range_bound)]
pub fn resample_streamline(s: &Streamline, step: f64) -> Result<Streamline> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {step}")));
    }
    if s.len() < 2 {
        return Err(Error::DegenerateStreamline(format!("{} point(s)", s.len())));
    }
    if s.arc_length() <= 1e-12 {
        return Err(Error::DegenerateStreamline("zero arc length".into()));
    }
    let pts = &s.points;
    let mut out = vec![pts[0]];
    let mut current = pts[0];
    let mut segment = 0;
    let mut t_min = 0.0;
    'walk: loop {
        for j in segment..pts.len() - 1 {
            let a = pts[j];
            let d = pts[j + 1] - a;
            let dd = d.norm_squared();
            if dd == 0.0 {
                continue;
            }
            // |a + t d - current|^2 = step^2
            let f = a - current;
            let b = 2.0 * f.dot(&d);
            let c = f.norm_squared() - step * step;
            let disc = b * b - 4.0 * dd * c;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let lo = if j == segment { t_min } else { 0.0 };
            let root = [(-b - sq) / (2.0 * dd), (-b + sq) / (2.0 * dd)]
                .into_iter()
                .find(|t| *t > lo + 1e-12 && *t <= 1.0 + 1e-9);
            if let Some(t) = root {
                // A vertex on the sphere can round to just past the segment end.
                let t = t.min(1.0);
                current = a + d * t;
                out.push(current);
                segment = j;
                t_min = t;
                continue 'walk;
            }
        }
        break;
    }
    let end = *pts.last().unwrap();
    if (end - current).norm() > 1e-9 {
        out.push(end);
    }
    Ok(Streamline::new(out))
}

/// Per-point supervision: point `i < n-1` gets the label of the unit
/// direction towards point `i+1`; the last point gets the EoF label.
pub fn direction_targets(
    s: &Streamline,
    sphere: &Sphere,
    cfg: &SmoothingConfig,
    smooth: bool,
) -> Result<Vec<SoftLabel>> {
    if s.len() < 2 {
        return Err(Error::DegenerateStreamline(format!("{} point(s)", s.len())));
    }
    let mut labels = Vec::with_capacity(s.len());
    for (i, w) in s.points.windows(2).enumerate() {
        let d = w[1] - w[0];
        let n = d.norm();
        if !(n > 1e-12) {
            return Err(Error::DegenerateStreamline(format!("points {i} and {} coincide", i + 1)));
        }
        let theta = d / n;
        labels.push(if smooth { sphere.smooth_label(&theta, cfg)? } else { sphere.hard_label(&theta)? });
    }
    labels.push(sphere.eof_label());
    Ok(labels)
}

/// Index windows of at most `max_len` covering `0..n`, consecutive windows
/// sharing `overlap` indices.
#[allow(clippy::single_range_in_vec_init)]
pub fn window_ranges(n: usize, max_len: usize, overlap: usize) -> Result<Vec<Range<usize>>> {
    if max_len == 0 || overlap >= max_len {
        return Err(Error::invalid(format!("window {max_len} with overlap {overlap}")));
    }
    if n <= max_len {
        return Ok(vec![0..n]);
    }
    let stride = max_len - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_len).min(n);
        out.push(start..end);
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(out)
}
