//! Generates a synthetic dataset, writes it to disk, reloads it and scores the
//! per-frame ridge baseline on a held-out fold.
//!
//! ```text
//! cargo run --release --example synthetic_data -- [snr]
//! ```

use affuse::baseline::{ridge_baseline, DEFAULT_RIDGE_LAMBDA};
use affuse::config::FeatureDims;
use affuse::data::{synth_generate, write_dataset, Dataset};

fn main() -> affuse::Result<()> {
    let snr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let dims = FeatureDims::default();
    let samples = synth_generate(40, 512, 7, snr, &dims)?;

    let dir = std::env::temp_dir().join("affuse_synthetic_example");
    let manifest = write_dataset(&dir, &samples)?;
    let dataset = Dataset::load(&manifest, &dims)?;
    assert_eq!(dataset.samples, samples);
    println!("wrote and reloaded {} sequences under {}", dataset.samples.len(), dir.display());

    for fold in 0..6 {
        let (train, val) = dataset.split(6, 7, fold)?;
        let report = ridge_baseline(&train, &val, DEFAULT_RIDGE_LAMBDA)?;
        println!("ridge fold {fold} ({} val sequences): {}", val.len(), report.line(fold));
    }
    Ok(())
}
