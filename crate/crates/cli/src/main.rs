use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracto_cli::{cmd_eval, cmd_phantom, cmd_track, cmd_train, describe, CliError, CliResult, RunConfig, CHECKPOINT, METRICS};

#[derive(Parser)]
#[command(name = "tracto", version, about = "Transformer streamline tractography on synthetic phantoms")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with [model], [train], [tracking], [smoothing] and [phantom] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom: DWI, masks, gradients, reference and ground truth.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// Noise RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a data directory's reference tractogram.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track seeds through a data directory with a trained checkpoint.
    Track {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to model.ckpt inside --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a tractogram against a ground-truth directory.
    Eval {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Where to write the key=value report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Ablation {
    #[arg(long)]
    no_cnn3d: bool,
    #[arg(long)]
    no_reverse_aug: bool,
    #[arg(long)]
    no_smooth_labels: bool,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Phantom { seed, .. } => {
            if let Some(s) = seed {
                cfg.phantom.rng_seed = *s;
            }
        }
        Command::Train { ablation, epochs, seed, .. } => {
            if ablation.no_cnn3d {
                cfg.model.use_cnn3d = false;
            }
            if ablation.no_reverse_aug {
                cfg.train.use_reverse_aug = false;
            }
            if ablation.no_smooth_labels {
                cfg.train.use_smooth_labels = false;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(s) = seed {
                cfg.train.seed = *s;
            }
        }
        Command::Track { n_seeds, seed, .. } => {
            if let Some(n) = n_seeds {
                cfg.tracking.n_seeds = *n;
            }
            if let Some(s) = seed {
                cfg.tracking.rng_seed = *s;
            }
        }
        Command::Eval { .. } => {}
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::Phantom { out, .. } => cmd_phantom(&cfg.phantom, &out),
        Command::Train { data, out, .. } => {
            let report = cmd_train(&cfg, &data, &out)?;
            if let Some(m) = report.metrics.last() {
                println!("{m}");
            }
            println!("best_epoch={}", report.best_epoch);
            Ok(())
        }
        Command::Track { data, checkpoint, out, .. } => {
            let ckpt = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT));
            let output = cmd_track(&cfg, &data, &ckpt, &out)?;
            println!("{}", output.histogram);
            Ok(())
        }
        Command::Eval { candidate, gt, report } => {
            let report = report.unwrap_or_else(|| candidate.with_file_name(METRICS));
            let m = cmd_eval(&candidate, &gt, Some(&report))?;
            eprintln!("{}", describe(&m));
            println!("{m}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
