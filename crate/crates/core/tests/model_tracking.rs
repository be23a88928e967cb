use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracto_core::model::{save_checkpoint, ModelConfig, ModelParams};
use tracto_core::sphere::{SmoothingConfig, Sphere};
use tracto_core::streamline::{Streamline, Tractogram};
use tracto_core::tracker::{track_seeds, TrackingConfig, TrackingInputs};
use tracto_core::train::{build_dataset, evaluate, train_loop, TrainConfig, TrainOutputs};
use tracto_core::volume::{DwiVolume, MapKind, ScalarMap, VoxelCube};
use tracto_core::{Affine, Vec3};

/// Lowest index among the maxima, as the tracker breaks ties.
fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

const DIMS: [usize; 3] = [16, 16, 16];
const CHANNELS: usize = 6;

fn toy_config() -> ModelConfig {
    ModelConfig { k: 32, d_model: 32, n_layers: 2, n_heads: 4, d_ffn: 64, dropout_p: 0.0, g_in: CHANNELS, use_cnn3d: true, max_len: 8 }
}

fn random_volume(seed: u64) -> DwiVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = DIMS.iter().product::<usize>() * CHANNELS;
    let gradients = Sphere::fibonacci(CHANNELS).unwrap().directions().to_vec();
    DwiVolume::new(DIMS, (0..n).map(|_| rng.random_range(0.0..1.0)).collect(), Affine::identity(), gradients, vec![1000.0; CHANNELS])
        .unwrap()
}

/// Twenty straight 4-point streamlines with random starts and directions.
fn toy_streamlines(seed: u64) -> Tractogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = (0..20)
        .map(|_| {
            let start = Vec3::from_fn(|_, _| rng.random_range(3.0..12.0));
            let dir = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            Streamline::new((0..4).map(|i| start + dir * i as f64).collect())
        })
        .collect();
    Tractogram::new(lines)
}

fn toy_train_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 0.005, val_fraction: 0.0, use_reverse_aug: false, batch_size: 10, window_len: 8, window_overlap: 2, ..TrainConfig::default() }
}

fn train_toy(epochs: usize, threads: usize) -> (ModelParams, f64) {
    let volume = random_volume(1);
    let sphere = Sphere::fibonacci(32).unwrap();
    let train = toy_train_config(epochs);
    let dataset = build_dataset(&toy_streamlines(2), &volume, &sphere, &SmoothingConfig::default(), &train, 8).unwrap();
    let mut params = ModelParams::init(toy_config(), 3).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let report = pool.install(|| train_loop(&dataset, &mut params, &train, &TrainOutputs::default())).unwrap();
    let refs: Vec<_> = dataset.iter().collect();
    let (_, accuracy) = evaluate(&report.best_params, &refs).unwrap();
    (report.best_params, accuracy)
}

#[test]
fn toy_model_memorises_its_training_set() {
    let (_, accuracy) = train_toy(200, 2);
    assert!(accuracy > 95.0, "training accuracy {accuracy}");
}

#[test]
fn training_is_bit_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train_toy(3, 1);
    let (b, _) = train_toy(3, 3);
    save_checkpoint(&a, &dir.path().join("a.ckpt")).unwrap();
    save_checkpoint(&b, &dir.path().join("b.ckpt")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.ckpt")).unwrap(), std::fs::read(dir.path().join("b.ckpt")).unwrap());
}

fn box_map(kind: MapKind, inside: f64) -> ScalarMap {
    let mut data = Vec::new();
    for k in 0..DIMS[2] {
        for j in 0..DIMS[1] {
            for i in 0..DIMS[0] {
                let interior = [i, j, k].iter().all(|c| (2..14).contains(c));
                data.push(if interior { inside } else { 0.0 });
            }
        }
    }
    ScalarMap::new(DIMS, data, Affine::identity(), kind).unwrap()
}

#[test]
fn tracked_streamlines_obey_the_propagation_rules() {
    let (params, _) = train_toy(60, 2);
    let volume = random_volume(1);
    let sphere = Sphere::fibonacci(32).unwrap();
    let mask = box_map(MapKind::WhiteMatterMask, 1.0);
    let fa = box_map(MapKind::Fa, 0.5);
    let inputs = TrackingInputs { sphere: &sphere, volume: &volume, wm_mask: &mask, fa_map: &fa };
    let cfg = TrackingConfig { step_size: 0.8, bidirectional: false, max_steps: 30, ..TrackingConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seeds: Vec<Vec3> = (0..40).map(|_| Vec3::from_fn(|_, _| rng.random_range(3.0..12.0))).collect();

    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| track_seeds(&params, &inputs, &seeds, &cfg)).unwrap()
    };
    let out = run(1);
    assert_eq!(out.tractogram, run(4).tractogram);
    assert!(out.tractogram.streamlines.iter().any(|s| s.len() > 3));

    for s in &out.tractogram.streamlines {
        let cubes: Vec<VoxelCube> = s.points.iter().map(|p| volume.extract_cube(p).unwrap()).collect();
        for (i, p) in s.points.iter().enumerate() {
            assert!(mask.value_at(p).unwrap() > 0.0);
            if i + 1 == s.len() {
                break;
            }
            let step = s.points[i + 1] - p;
            assert!((step.norm() - cfg.step_size).abs() < 1e-12);
            if i > 0 {
                let prev = p - s.points[i - 1];
                assert!(prev.angle(&step).to_degrees() <= cfg.angle_threshold);
            }
            // Recomputing the context window from scratch picks the same class.
            let context: Vec<&VoxelCube> = cubes[(i + 1).saturating_sub(8)..=i].iter().collect();
            let logits = params.logits(&context).unwrap();
            let class = argmax(logits.row(context.len() - 1));
            assert_eq!(s.points[i + 1], p + sphere.direction(class) * cfg.step_size);
        }
    }
}
