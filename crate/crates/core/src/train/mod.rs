//! Supervised training: dataset assembly from reference streamlines, KL
//! loss against soft direction labels, Adam with plateau decay, and the
//! epoch loop.

mod adam;

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{save_checkpoint, Graph, Gradients, ModelParams};
use crate::sphere::{SmoothingConfig, SoftLabel, Sphere};
use crate::streamline::{direction_targets, window_ranges, Tractogram};
use crate::volume::{DwiVolume, VoxelCube};
use crate::{Error, Result};
pub use adam::{adam_step, AdamConfig, AdamState};

/// Floor applied to predicted probabilities inside the KL loss.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub cubes: Vec<VoxelCube>,
    pub targets: Vec<SoftLabel>,
    /// Index of the originating streamline; reversed copies share it.
    pub source: usize,
}

impl TrainExample {
    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub decay_factor: f64,
    pub plateau_epochs: usize,
    /// Absolute accuracy percentage points.
    pub min_improvement: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub use_reverse_aug: bool,
    pub use_smooth_labels: bool,
    /// Longer streamlines are split into windows of this many points.
    pub window_len: usize,
    /// Points shared by consecutive windows.
    pub window_overlap: usize,
    /// When non-zero, every suffix starting a multiple of this many points
    /// into a streamline is added as its own sequence, so that sequences
    /// also begin mid-bundle the way tracking seeds do.
    pub suffix_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            adam: AdamConfig::default(),
            decay_factor: 0.7,
            plateau_epochs: 2,
            min_improvement: 0.3,
            epochs: 30,
            batch_size: 20,
            val_fraction: 0.2,
            seed: 0,
            use_reverse_aug: true,
            use_smooth_labels: true,
            window_len: 100,
            window_overlap: 10,
            suffix_stride: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid(format!("decay_factor {} outside (0, 1)", self.decay_factor)));
        }
        if self.batch_size == 0 || self.plateau_epochs == 0 {
            return Err(Error::invalid("batch_size and plateau_epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.window_len < 2 || self.window_overlap >= self.window_len {
            return Err(Error::invalid(format!(
                "window_len {} must be at least 2 and exceed window_overlap {}",
                self.window_len, self.window_overlap
            )));
        }
        self.adam.validate()
    }
}

/// Builds one example per streamline (two with reverse augmentation),
/// windowed to `cfg.window_len` points, which may not exceed `max_len`.
/// Streamlines that leave the volume or are degenerate are dropped and
/// counted in the log.
pub fn build_dataset(
    tractogram: &Tractogram,
    volume: &DwiVolume,
    sphere: &Sphere,
    smoothing: &SmoothingConfig,
    cfg: &TrainConfig,
    max_len: usize,
) -> Result<Vec<TrainExample>> {
    cfg.validate()?;
    if cfg.window_len > max_len {
        return Err(Error::invalid(format!("window_len {} exceeds the model max_len {max_len}", cfg.window_len)));
    }
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (source, s) in tractogram.streamlines.iter().enumerate() {
        let Ok(cubes) = s.points.iter().map(|p| volume.extract_cube(p)).collect::<Result<Vec<_>>>() else {
            dropped += 1;
            continue;
        };
        let Ok(targets) = direction_targets(s, sphere, smoothing, cfg.use_smooth_labels) else {
            dropped += 1;
            continue;
        };
        let mut variants = vec![(cubes.clone(), targets)];
        if cfg.use_reverse_aug {
            let rev = s.reversed();
            let rcubes: Vec<VoxelCube> = cubes.into_iter().rev().collect();
            variants.push((rcubes, direction_targets(&rev, sphere, smoothing, cfg.use_smooth_labels)?));
        }
        for (cubes, targets) in variants {
            let n = cubes.len();
            let starts: Vec<usize> = match cfg.suffix_stride {
                0 => vec![0],
                k => (0..n.saturating_sub(1)).step_by(k).collect(),
            };
            for s in starts {
                for w in window_ranges(n - s, cfg.window_len, cfg.window_overlap)? {
                    let w = s + w.start..s + w.end;
                    out.push(TrainExample { cubes: cubes[w.clone()].to_vec(), targets: targets[w].to_vec(), source });
                }
            }
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} of {} streamlines (outside the volume or degenerate)", tractogram.len());
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// `sum_j t_j ln(t_j / max(p_j, KL_FLOOR))` with `0 ln 0 = 0`.
pub fn kl_divergence(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t.ln() - p.max(KL_FLOOR).ln()))
        .sum()
}

/// Mean KL divergence over valid positions (0 when none are valid).
pub fn kl_loss(pred: &[SoftLabel], target: &[SoftLabel], valid: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::invalid("kl_loss sequence lengths differ"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((p, t), ok) in pred.iter().zip(target).zip(valid) {
        if !ok {
            continue;
        }
        if p.len() != t.len() {
            return Err(Error::invalid("kl_loss class counts differ"));
        }
        total += kl_divergence(t.probs(), p.probs());
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Percentage of valid positions whose argmaxes agree.
pub fn classification_accuracy(pred: &[SoftLabel], target: &[SoftLabel], valid: &[bool]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for ((p, t), ok) in pred.iter().zip(target).zip(valid) {
        if *ok {
            n += 1;
            hit += (p.argmax() == t.argmax()) as usize;
        }
    }
    if n == 0 { 0.0 } else { 100.0 * hit as f64 / n as f64 }
}

/// Decays `current_lr` when each of the last `plateau_epochs` accuracies
/// improves on the best earlier value by less than `min_improvement`.
pub fn lr_schedule_step(history: &[f64], current_lr: f64, cfg: &TrainConfig) -> f64 {
    let w = cfg.plateau_epochs;
    if history.len() <= w {
        return current_lr;
    }
    let (prior, recent) = history.split_at(history.len() - w);
    let best = prior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if recent.iter().all(|a| a - best < cfg.min_improvement) {
        current_lr * cfg.decay_factor
    } else {
        current_lr
    }
}

/// Plateau schedule whose detection window restarts after every decay.
#[derive(Debug, Clone, Default)]
pub struct PlateauSchedule {
    start: usize,
}

impl PlateauSchedule {
    pub fn step(&mut self, history: &[f64], current_lr: f64, cfg: &TrainConfig) -> f64 {
        let lr = lr_schedule_step(&history[self.start.min(history.len())..], current_lr, cfg);
        if lr != current_lr {
            // The epoch that triggered the decay becomes the new baseline.
            self.start = history.len() - 1;
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.9} val_loss={:.9} val_accuracy={:.4} lr={:.9}",
            self.epoch, self.train_loss, self.val_loss, self.val_accuracy, self.lr
        )
    }
}

/// Where the loop writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_params: ModelParams,
}

/// Mixes seed components into an independent stream seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finaliser
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn target_matrix(ex: &TrainExample) -> Vec<f64> {
    ex.targets.iter().flat_map(|t| t.probs().iter().copied()).collect()
}

/// Loss (weighted by `weight` per position) and gradients of one example.
fn example_gradients(
    params: &ModelParams,
    ex: &TrainExample,
    weight: f64,
    dropout_seed: u64,
) -> Result<(f64, Gradients)> {
    let p = params.config().dropout_p;
    let mut g = if p > 0.0 { Graph::training(params.store(), p, dropout_seed) } else { Graph::tracked(params.store()) };
    let cubes: Vec<&VoxelCube> = ex.cubes.iter().collect();
    let tokens = params.embed_sequence(&mut g, &cubes)?;
    let logits = params.decoder_forward(&mut g, tokens, &vec![true; ex.len()])?;
    let loss = g.kl_loss(logits, target_matrix(ex), vec![weight; ex.len()])?;
    let value = g.value(loss)[0];
    Ok((value, g.backward(loss)?))
}

/// Eval-mode predictions for one example.
pub fn predict_example(params: &ModelParams, ex: &TrainExample) -> Result<Vec<SoftLabel>> {
    let cubes: Vec<&VoxelCube> = ex.cubes.iter().collect();
    let logits = params.logits(&cubes)?;
    (0..ex.len()).map(|i| crate::model::predict_fodf(logits.row(i))).collect()
}

/// Position-weighted mean loss and accuracy over `examples`.
pub fn evaluate(params: &ModelParams, examples: &[&TrainExample]) -> Result<(f64, f64)> {
    let per: Vec<(f64, f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let pred = predict_example(params, ex)?;
            let valid = vec![true; ex.len()];
            Ok((
                kl_loss(&pred, &ex.targets, &valid)?,
                classification_accuracy(&pred, &ex.targets, &valid),
                ex.len(),
            ))
        })
        .collect::<Result<_>>()?;
    let n: usize = per.iter().map(|p| p.2).sum();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let loss = per.iter().map(|p| p.0 * p.2 as f64).sum::<f64>() / n as f64;
    let acc = per.iter().map(|p| p.1 * p.2 as f64).sum::<f64>() / n as f64;
    Ok((loss, acc))
}

/// Splits by source streamline so reversed copies stay on one side.
/// With fewer than two sources the validation set is the training set.
pub fn split_dataset(dataset: &[TrainExample], cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut sources: Vec<usize> = dataset.iter().map(|e| e.source).collect();
    sources.sort_unstable();
    sources.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5eed]));
    sources.shuffle(&mut rng);
    let n_val = ((sources.len() as f64 * cfg.val_fraction).round() as usize).min(sources.len().saturating_sub(1));
    let val_sources = &sources[..n_val];
    let (val, train): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| val_sources.contains(&dataset[i].source));
    if val.is_empty() {
        let all = train.clone();
        (train, all)
    } else {
        (train, val)
    }
}

/// Runs `cfg.epochs` epochs of seeded mini-batch training and returns the
/// weights with the best validation accuracy (earliest on ties).
pub fn train_loop(
    dataset: &[TrainExample],
    params: &mut ModelParams,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut train_idx, val_idx) = split_dataset(dataset, cfg);
    let val: Vec<&TrainExample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let mut state = AdamState::new(params.store());
    let mut schedule = PlateauSchedule::default();
    let mut lr = cfg.lr;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut log_file = match &outputs.metrics_log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64]));
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut positions) = (0.0, 0usize);
        for (b, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            let n_pos: usize = batch.iter().map(|&i| dataset[i].len()).sum();
            let weight = 1.0 / n_pos as f64;
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(&[cfg.seed, epoch as u64, b as u64, i as u64]);
                    example_gradients(params, &dataset[i], weight, seed)
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(params.store());
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l;
                grads.add_assign(g);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: loss {batch_loss}")));
            }
            params.store_mut().zero_grad();
            params.store_mut().accumulate(&grads);
            adam_step(params.store_mut(), &mut state, lr, &cfg.adam)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += batch_loss * n_pos as f64;
            positions += n_pos;
        }
        let (val_loss, val_accuracy) = evaluate(params, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: validation loss {val_loss}")));
        }
        let m = EpochMetrics { epoch, train_loss: loss_sum / positions.max(1) as f64, val_loss, val_accuracy, lr };
        log::info!("{m}");
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{m}")?;
        }
        metrics.push(m);
        history.push(val_accuracy);
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            if let Some(path) = &outputs.checkpoint {
                save_checkpoint(params, path)?;
            }
            best = Some((epoch, val_accuracy, params.clone()));
        }
        lr = schedule.step(&history, lr, cfg);
    }
    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (e, p),
        None => {
            if let Some(path) = &outputs.checkpoint {
                save_checkpoint(params, path)?;
            }
            (0, params.clone())
        }
    };
    Ok(TrainReport { metrics, best_epoch, best_params })
}

/// Convenience for callers holding a path rather than [`TrainOutputs`].
pub fn outputs_in(dir: &Path) -> TrainOutputs {
    TrainOutputs { checkpoint: Some(dir.join("model.ckpt")), metrics_log: Some(dir.join("metrics.log")) }
}
