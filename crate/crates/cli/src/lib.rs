//! Pipeline commands behind the `tracto` binary: phantom generation,
//! training, tracking and scoring.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracto_core::model::{load_checkpoint, ModelConfig, ModelParams};
use tracto_core::phantom_eval::{generate_phantom, read_ground_truth, score_tractogram, write_ground_truth, Metrics, PhantomSpec};
use tracto_core::sphere::{SmoothingConfig, Sphere};
use tracto_core::streamline::{read_tck, write_tck};
use tracto_core::tracker::{track_all, TrackingConfig, TrackingInputs, TrackingOutput};
use tracto_core::train::{build_dataset, outputs_in, train_loop, TrainConfig, TrainReport};
use tracto_core::volume::dti::fa_map;
use tracto_core::volume::gradients::{read_bvals, read_bvecs, write_bvals, write_bvecs};
use tracto_core::volume::{read_nifti, resample_volume, write_nifti, DwiVolume, MapKind, ScalarMap};

pub const DWI: &str = "dwi.nii";
pub const WM_MASK: &str = "wm_mask.nii";
pub const FA: &str = "fa.nii";
pub const REFERENCE: &str = "reference.tck";
pub const BVALS: &str = "bvals";
pub const BVECS: &str = "bvecs";
pub const GROUND_TRUTH: &str = "gt";
pub const CHECKPOINT: &str = "model.ckpt";
pub const OUTPUT_TCK: &str = "output.tck";
pub const STOP_SUMMARY: &str = "stops.txt";
pub const METRICS: &str = "metrics.txt";

/// Failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable input, malformed file or invalid configuration.
    Input(String),
    /// Non-finite values during training or inference.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tracto_core::Error> for CliError {
    fn from(e: tracto_core::Error) -> Self {
        match e {
            tracto_core::Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn io_context(path: &Path) -> impl FnOnce(tracto_core::Error) -> CliError + '_ {
    move |e| match e {
        tracto_core::Error::NonFinite(_) => CliError::Numeric(format!("{}: {e}", path.display())),
        _ => CliError::Input(format!("{}: {e}", path.display())),
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Everything a command may consume. Sections mirror the TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracking: TrackingConfig,
    pub smoothing: SmoothingConfig,
    pub phantom: PhantomSpec,
    /// Set when the file had a `[model]` table; tracking then insists the
    /// checkpoint was trained with exactly that configuration.
    #[serde(skip)]
    pub model_explicit: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.model_explicit = table.contains_key("model");
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tracking.validate()?;
        self.smoothing.validate()?;
        self.phantom.validate()?;
        Ok(())
    }
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Input(format!("output directory {} does not exist", dir.display())))
    }
}

/// Writes the phantom's DWI, masks, gradient table, reference tractogram
/// and ground-truth directory into `out`.
pub fn cmd_phantom(spec: &PhantomSpec, out: &Path) -> CliResult<()> {
    spec.validate()?;
    require_dir(out)?;
    let ph = generate_phantom(spec)?;
    write_nifti(&ph.volume.to_nifti(), &out.join(DWI))?;
    write_nifti(&ph.wm_mask.to_nifti(), &out.join(WM_MASK))?;
    write_nifti(&ph.fa_map.to_nifti(), &out.join(FA))?;
    write_bvals(ph.volume.bvalues(), &out.join(BVALS))?;
    write_bvecs(ph.volume.gradients(), &out.join(BVECS))?;
    write_tck(&ph.ground_truth.reference(), &out.join(REFERENCE))?;
    write_ground_truth(&ph.ground_truth, &out.join(GROUND_TRUTH))?;
    log::info!("phantom written to {}", out.display());
    Ok(())
}

pub fn load_dwi(data: &Path) -> CliResult<DwiVolume> {
    let path = data.join(DWI);
    let image = read_nifti(&path).map_err(io_context(&path))?;
    let bvals = read_bvals(&data.join(BVALS)).map_err(io_context(&data.join(BVALS)))?;
    let bvecs = read_bvecs(&data.join(BVECS)).map_err(io_context(&data.join(BVECS)))?;
    DwiVolume::from_nifti(&image, bvecs, bvals).map_err(io_context(&path))
}

fn load_map(path: &Path, kind: MapKind) -> CliResult<ScalarMap> {
    ScalarMap::from_nifti(&read_nifti(path).map_err(io_context(path))?, kind).map_err(io_context(path))
}

/// The network's input grid: the signal resampled onto `g_in` Fibonacci
/// directions.
pub fn model_volume(volume: &DwiVolume, model: &ModelConfig) -> CliResult<DwiVolume> {
    Ok(resample_volume(volume, &Sphere::fibonacci(model.g_in)?, None)?)
}

fn same_grid(a: &ScalarMap, v: &DwiVolume, what: &str) -> CliResult<()> {
    if a.dims() != v.dims() {
        return Err(CliError::Input(format!("{what} grid {:?} differs from the DWI grid {:?}", a.dims(), v.dims())));
    }
    Ok(())
}

/// Trains on `data/reference.tck` and writes `model.ckpt` and
/// `metrics.log` into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<TrainReport> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.smoothing.validate()?;
    require_dir(out)?;
    let volume = load_dwi(data)?;
    let mask = load_map(&data.join(WM_MASK), MapKind::WhiteMatterMask)?;
    same_grid(&mask, &volume, "white-matter mask")?;
    let tck = data.join(REFERENCE);
    let tractogram = read_tck(&tck).map_err(io_context(&tck))?;
    let input = model_volume(&volume, &cfg.model)?;
    let sphere = Sphere::fibonacci(cfg.model.k)?;
    let dataset = build_dataset(&tractogram, &input, &sphere, &cfg.smoothing, &cfg.train, cfg.model.max_len)?;
    log::info!("{} training sequences from {} streamlines", dataset.len(), tractogram.len());
    let mut params = ModelParams::init(cfg.model.clone(), cfg.train.seed)?;
    let outputs = outputs_in(out);
    if let Some(log) = &outputs.metrics_log {
        // The loop appends, so start each run from an empty log.
        fs::write(log, "").map_err(|e| CliError::Input(format!("{}: {e}", log.display())))?;
    }
    Ok(train_loop(&dataset, &mut params, &cfg.train, &outputs)?)
}

/// Tracks from seeds in the white-matter mask and writes `output.tck` and
/// `stops.txt` into `out`.
pub fn cmd_track(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> CliResult<TrackingOutput> {
    cfg.tracking.validate()?;
    require_dir(out)?;
    let expected = cfg.model_explicit.then_some(&cfg.model);
    let params = load_checkpoint(checkpoint, expected).map_err(io_context(checkpoint))?;
    let volume = load_dwi(data)?;
    let mask = load_map(&data.join(WM_MASK), MapKind::WhiteMatterMask)?;
    same_grid(&mask, &volume, "white-matter mask")?;
    let fa_path = data.join(FA);
    let fa = if fa_path.exists() {
        load_map(&fa_path, MapKind::Fa)?
    } else {
        log::info!("{} missing, fitting tensors", fa_path.display());
        fa_map(&volume)?
    };
    same_grid(&fa, &volume, "FA map")?;
    let input = model_volume(&volume, params.config())?;
    let sphere = Sphere::fibonacci(params.config().k)?;
    let inputs = TrackingInputs { sphere: &sphere, volume: &input, wm_mask: &mask, fa_map: &fa };
    let output = track_all(&params, &inputs, &cfg.tracking)?;
    write_tck(&output.tractogram, &out.join(OUTPUT_TCK))?;
    fs::write(out.join(STOP_SUMMARY), format!("{}\n", output.histogram))
        .map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    log::info!("{} streamlines from {} seeds", output.tractogram.len(), cfg.tracking.n_seeds);
    Ok(output)
}

/// Scores `candidate` against a ground-truth directory and optionally
/// writes the key=value report to `report`.
pub fn cmd_eval(candidate: &Path, ground_truth: &Path, report: Option<&Path>) -> CliResult<Metrics> {
    let tractogram = read_tck(candidate).map_err(io_context(candidate))?;
    let gt = read_ground_truth(ground_truth).map_err(io_context(ground_truth))?;
    let metrics = score_tractogram(&tractogram, &gt).map_err(io_context(candidate))?;
    if let Some(p) = report {
        fs::write(p, format!("{metrics}\n")).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    }
    Ok(metrics)
}

/// Human-readable summary printed alongside the key=value report.
pub fn describe(m: &Metrics) -> String {
    let mut s = format!(
        "{} streamlines: valid connections {:.2}%, overlap {:.2}%, overreach {:.2}%, F1 {:.2}%",
        m.streamlines, m.vc, m.ol, m.or, m.f1
    );
    for b in &m.bundles {
        s.push_str(&format!("\n  {}: {} valid, OL {:.2}%, OR {:.2}%, F1 {:.2}%", b.name, b.valid, b.ol, b.or, b.f1));
    }
    s
}
