//! Deterministic argmax streamline propagation.
//!
//! From each seed the predictor's distribution at the last point picks a
//! direction class; the EoF class, the volume boundary, the white-matter
//! mask, the angle threshold, the FA threshold and a step cap terminate the
//! streamline. With `bidirectional`, a streamline that stops is reversed and
//! propagation resumes from the seed end with the reversed history as
//! context.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::sphere::{argmax, unchecked_angle, Sphere};
use crate::streamline::{Streamline, Tractogram};
use crate::volume::{DwiVolume, ScalarMap, VoxelCube};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Millimetres.
    pub step_size: f64,
    /// Degrees.
    pub angle_threshold: f64,
    pub fa_threshold: f64,
    pub max_steps: usize,
    pub n_seeds: usize,
    pub rng_seed: u64,
    pub bidirectional: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            angle_threshold: 70.0,
            fa_threshold: 0.05,
            max_steps: 200,
            n_seeds: 500,
            rng_seed: 0,
            bidirectional: true,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("step_size {} must be positive", self.step_size)));
        }
        if !(self.angle_threshold > 0.0 && self.angle_threshold < 180.0) {
            return Err(Error::invalid(format!("angle_threshold {} outside (0, 180)", self.angle_threshold)));
        }
        if !(0.0..1.0).contains(&self.fa_threshold) {
            return Err(Error::invalid(format!("fa_threshold {} outside [0, 1)", self.fa_threshold)));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StopReason {
    EofPredicted,
    OutOfBounds,
    OutOfMask,
    AngleExceeded,
    LowFa,
    MaxStepsReached,
}

impl StopReason {
    pub const ALL: [StopReason; 6] = [
        StopReason::EofPredicted,
        StopReason::OutOfBounds,
        StopReason::OutOfMask,
        StopReason::AngleExceeded,
        StopReason::LowFa,
        StopReason::MaxStepsReached,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StopReason::EofPredicted => "eof_predicted",
            StopReason::OutOfBounds => "out_of_bounds",
            StopReason::OutOfMask => "out_of_mask",
            StopReason::AngleExceeded => "angle_exceeded",
            StopReason::LowFa => "low_fa",
            StopReason::MaxStepsReached => "max_steps_reached",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything that maps a point history to class scores for the next step.
///
/// `Token` is the per-point representation, computed once per point.
/// `scores` sees at most `context_len()` tokens and returns `K + 1` values
/// whose argmax selects the class (index `K` is EoF).
pub trait FodfPredictor: Sync {
    type Token: Clone + Send + Sync;

    fn context_len(&self) -> usize;

    fn token(&self, cube: &VoxelCube) -> Result<Self::Token>;

    fn scores(&self, tokens: &[Self::Token]) -> Result<Vec<f64>>;
}

impl FodfPredictor for ModelParams {
    type Token = Vec<f64>;

    fn context_len(&self) -> usize {
        self.config().max_len
    }

    fn token(&self, cube: &VoxelCube) -> Result<Vec<f64>> {
        self.embed_cube(cube)
    }

    fn scores(&self, tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.last_logits(tokens)
    }
}

/// Read-only inputs shared by every seed.
#[derive(Clone, Copy)]
pub struct TrackingInputs<'a> {
    pub sphere: &'a Sphere,
    pub volume: &'a DwiVolume,
    pub wm_mask: &'a ScalarMap,
    pub fa_map: &'a ScalarMap,
}

/// Uniform positive-mask voxels with uniform in-voxel jitter, in RAS.
pub fn sample_seeds(mask: &ScalarMap, n: usize, rng_seed: u64) -> Result<Vec<Vec3>> {
    let voxels = mask.positive_voxels();
    if voxels.is_empty() {
        return Err(Error::invalid("seed mask has no positive voxel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // Half-open jitter keeps every seed's nearest voxel on the chosen voxel.
    let h = 0.5 - 1e-9;
    Ok((0..n)
        .map(|_| {
            let v = voxels[rng.random_range(0..voxels.len())];
            let j = Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h));
            mask.voxel_to_ras(&(Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64) + j))
        })
        .collect())
}

/// First violated criterion among boundary, mask, angle and FA.
pub fn check_stop(
    prev_dir: Option<&Vec3>,
    new_dir: &Vec3,
    next_point: &Vec3,
    volume: &DwiVolume,
    wm_mask: &ScalarMap,
    fa_map: &ScalarMap,
    cfg: &TrackingConfig,
) -> Option<StopReason> {
    if volume.nearest_voxel(next_point).is_none() {
        return Some(StopReason::OutOfBounds);
    }
    if wm_mask.value_at(next_point).is_none_or(|m| m <= 0.0) {
        return Some(StopReason::OutOfMask);
    }
    if let Some(prev) = prev_dir {
        if unchecked_angle(prev, new_dir).to_degrees() > cfg.angle_threshold {
            return Some(StopReason::AngleExceeded);
        }
    }
    if fa_map.value_at(next_point).is_none_or(|fa| fa < cfg.fa_threshold) {
        return Some(StopReason::LowFa);
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub streamline: Streamline,
    /// Reason the final propagation pass stopped.
    pub stop: StopReason,
    /// Reason the first pass stopped, when a second pass ran.
    pub first_stop: Option<StopReason>,
}

struct Walk<T> {
    points: Vec<Vec3>,
    tokens: Vec<T>,
    steps: usize,
}

fn propagate<P: FodfPredictor>(
    predictor: &P,
    inputs: &TrackingInputs,
    walk: &mut Walk<P::Token>,
    cfg: &TrackingConfig,
) -> Result<StopReason> {
    let eof = inputs.sphere.eof_index();
    let ctx = predictor.context_len().max(1);
    loop {
        if walk.steps >= cfg.max_steps {
            return Ok(StopReason::MaxStepsReached);
        }
        let n = walk.points.len();
        let scores = predictor.scores(&walk.tokens[n.saturating_sub(ctx)..])?;
        if scores.len() != eof + 1 {
            return Err(Error::invalid(format!("predictor returned {} scores for {} classes", scores.len(), eof + 1)));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("predictor score {bad}")));
        }
        let class = argmax(&scores);
        if class == eof {
            return Ok(StopReason::EofPredicted);
        }
        let dir = inputs.sphere.direction(class);
        let current = walk.points[n - 1];
        let next = current + dir * cfg.step_size;
        let prev = (n >= 2).then(|| (current - walk.points[n - 2]).normalize());
        if let Some(r) = check_stop(prev.as_ref(), &dir, &next, inputs.volume, inputs.wm_mask, inputs.fa_map, cfg) {
            return Ok(r);
        }
        let cube = inputs.volume.extract_cube(&next)?;
        walk.tokens.push(predictor.token(&cube)?);
        walk.points.push(next);
        walk.steps += 1;
    }
}

/// Tracks one streamline from `seed`.
pub fn track_one<P: FodfPredictor>(
    predictor: &P,
    inputs: &TrackingInputs,
    seed: &Vec3,
    cfg: &TrackingConfig,
) -> Result<TrackResult> {
    let cube = inputs
        .volume
        .extract_cube(seed)
        .map_err(|_| Error::invalid(format!("seed {seed:?} lies outside the volume")))?;
    let mut walk = Walk { points: vec![*seed], tokens: vec![predictor.token(&cube)?], steps: 0 };
    let first = propagate(predictor, inputs, &mut walk, cfg)?;
    if !cfg.bidirectional || walk.points.len() < 2 || first == StopReason::MaxStepsReached {
        return Ok(TrackResult { streamline: Streamline::new(walk.points), stop: first, first_stop: None });
    }
    walk.points.reverse();
    walk.tokens.reverse();
    let second = propagate(predictor, inputs, &mut walk, cfg)?;
    Ok(TrackResult { streamline: Streamline::new(walk.points), stop: second, first_stop: Some(first) })
}

/// Stop-reason counts plus seeds that failed with an error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopHistogram {
    pub counts: BTreeMap<StopReason, usize>,
    pub failed: usize,
}

impl StopHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum::<usize>() + self.failed
    }

    pub fn get(&self, r: StopReason) -> usize {
        self.counts.get(&r).copied().unwrap_or(0)
    }
}

impl fmt::Display for StopHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in StopReason::ALL {
            writeln!(f, "{}={}", r.name(), self.get(r))?;
        }
        write!(f, "failed={}", self.failed)
    }
}

#[derive(Debug, Clone)]
pub struct TrackingOutput {
    pub tractogram: Tractogram,
    /// One entry per seed, in seed order.
    pub results: Vec<std::result::Result<TrackResult, String>>,
    pub histogram: StopHistogram,
}

/// Tracks every seed in parallel. Output order follows seed order; per-seed
/// errors are recorded and skipped.
pub fn track_seeds<P: FodfPredictor>(
    predictor: &P,
    inputs: &TrackingInputs,
    seeds: &[Vec3],
    cfg: &TrackingConfig,
) -> Result<TrackingOutput> {
    cfg.validate()?;
    let results: Vec<std::result::Result<TrackResult, String>> = seeds
        .par_iter()
        .map(|s| track_one(predictor, inputs, s, cfg).map_err(|e| e.to_string()))
        .collect();
    let mut histogram = StopHistogram::default();
    let mut streamlines = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(t) => {
                *histogram.counts.entry(t.stop).or_default() += 1;
                streamlines.push(t.streamline.clone());
            }
            Err(e) => {
                log::warn!("seed {i} failed: {e}");
                histogram.failed += 1;
            }
        }
    }
    Ok(TrackingOutput { tractogram: Tractogram::new(streamlines), results, histogram })
}

/// Samples `cfg.n_seeds` seeds from the white-matter mask and tracks them.
pub fn track_all<P: FodfPredictor>(
    predictor: &P,
    inputs: &TrackingInputs,
    cfg: &TrackingConfig,
) -> Result<TrackingOutput> {
    cfg.validate()?;
    if cfg.n_seeds == 0 {
        return Ok(TrackingOutput { tractogram: Tractogram::default(), results: Vec::new(), histogram: StopHistogram::default() });
    }
    let seeds = sample_seeds(inputs.wm_mask, cfg.n_seeds, cfg.rng_seed)?;
    track_seeds(predictor, inputs, &seeds, cfg)
}
