use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use affuse::config::TrainConfig;
use affuse::data::io::load_feature_file;
use affuse::data::{synth_generate, write_dataset, Dataset};
use affuse::model::{model_gradcheck, MODEL_GRADCHECK_STEP};
use affuse::numerics::GradcheckOptions;
use affuse::trainer::checkpoint::{load_for_config, save_checkpoint};
use affuse::trainer::{evaluate, predict_features, train, write_predictions};
use affuse::{Error, Result};

/// Tolerance the `gradcheck` subcommand enforces.
const GRADCHECK_TOL: f64 = 1e-6;
/// Frames of random input used by `gradcheck`.
const GRADCHECK_FRAMES: usize = 10;

#[derive(Parser)]
#[command(name = "affuse", version, about = "Audio-visual valence/arousal fusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (features, labels and a manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        sequences: usize,
        #[arg(long, default_value_t = 512)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        /// Config whose feature widths to use; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on every fold except `fold` and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `fold,ccc_valence,ccc_arousal,P` for a checkpoint on one fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
    },
    /// Predict valence and arousal for one sequence of feature files.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Visual, VGGish and log-mel feature files, in that order.
        #[arg(long, num_args = 3, value_names = ["V", "A1", "A2"])]
        features: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences; exits 0 iff the
    /// maximum relative error is below 1e-6.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Shrink the architecture to the tiny widths and check every parameter.
        #[arg(long)]
        tiny: bool,
        /// Coordinates checked per tensor without --tiny.
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { out, sequences, frames, seed, snr, config } => {
            let dims = match config {
                Some(path) => TrainConfig::load(&path)?.dims,
                None => TrainConfig::default().dims,
            };
            let samples = synth_generate(sequences, frames, seed, snr, &dims)?;
            let manifest = write_dataset(&out, &samples)?;
            println!("{}", manifest.display());
        }
        Command::Train { config, data, fold, out } => {
            let cfg = TrainConfig::load(&config)?;
            let dataset = Dataset::load(&data, &cfg.dims)?;
            let outcome = train(&cfg, &dataset, fold)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_checkpoint(&outcome.best, &out.join("best.ckpt"))?;
            save_checkpoint(&outcome.last, &out.join("last.ckpt"))?;
            cfg.save(&out.join("config.txt"))?;
            let log: String = outcome.log.iter().map(|e| e.line() + "\n").collect();
            write(&out.join("train.log"), &log)?;
            println!("best epoch {}: {}", outcome.best_epoch, outcome.best_report.line(fold));
        }
        Command::Eval { checkpoint, config, data, fold } => {
            let cfg = TrainConfig::load(&config)?;
            let params = load_for_config(&checkpoint, &cfg)?;
            let dataset = Dataset::load(&data, &cfg.dims)?;
            println!("{}", evaluate(&params, &cfg, &dataset, fold)?.line(fold));
        }
        Command::Predict { checkpoint, config, features, out } => {
            let cfg = TrainConfig::load(&config)?;
            let params = load_for_config(&checkpoint, &cfg)?;
            let [v, a1, a2] = [0, 1, 2].map(|i| load_feature_file(&features[i]));
            let pred = predict_features(&params, &cfg, v?.frames, a1?.frames, a2?.frames)?;
            write_predictions(&out, &pred)?;
        }
        Command::Gradcheck { config, tiny, coords } => {
            let cfg = TrainConfig::load(&config)?;
            let (cfg, cap) = if tiny { (cfg.shrunk(), None) } else { (cfg, Some(coords)) };
            let opts = GradcheckOptions { h: MODEL_GRADCHECK_STEP, max_coords_per_tensor: cap };
            let report = model_gradcheck(&cfg, GRADCHECK_FRAMES, cfg.seed, opts)?;
            if let Some(reason) = &report.invalid_reason {
                println!("invalid: {reason}");
                return Ok(ExitCode::FAILURE);
            }
            let worst = report.worst().map(|w| format!(" (worst {}[{}])", w.name, w.worst_index)).unwrap_or_default();
            println!("checked {} coordinates, max rel err {:.3e}{worst}", report.checked(), report.max_rel_err);
            if !report.passed(GRADCHECK_TOL) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
