//! Trains the fusion model on a synthetic dataset and compares it with the
//! ridge baseline on the held-out fold. Without an argument it uses the
//! compact settings in `examples/synthetic.cfg`.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [config-file]
//! ```

use std::time::Instant;

use affuse::baseline::{ridge_baseline, DEFAULT_RIDGE_LAMBDA};
use affuse::config::TrainConfig;
use affuse::data::{synth_generate, Dataset};
use affuse::trainer::train;

fn main() -> affuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match std::env::args().nth(1) {
        Some(path) => TrainConfig::load(path.as_ref())?,
        None => TrainConfig::parse(include_str!("synthetic.cfg"))?,
    };
    let dataset = Dataset::new(synth_generate(40, 512, 7, 10.0, &cfg.dims)?);
    let fold = 0;

    let (train_set, val_set) = dataset.split(cfg.folds, cfg.seed, fold)?;
    let ridge = ridge_baseline(&train_set, &val_set, DEFAULT_RIDGE_LAMBDA)?;
    println!("ridge baseline: {}", ridge.line(fold));

    let started = Instant::now();
    let outcome = train(&cfg, &dataset, fold)?;
    println!(
        "model (best epoch {}): {}  [{:.1}s]",
        outcome.best_epoch,
        outcome.best_report.line(fold),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
