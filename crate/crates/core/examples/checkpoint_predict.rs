//! Saves a freshly initialized model, reloads it against its configuration and
//! writes per-frame predictions for one synthetic sequence.
//!
//! ```text
//! cargo run --release --example checkpoint_predict
//! ```

use affuse::config::TrainConfig;
use affuse::data::synth_generate;
use affuse::model::FusionModel;
use affuse::params::ModelParams;
use affuse::trainer::checkpoint::{load_for_config, save_checkpoint};
use affuse::trainer::{predict_features, write_predictions};

fn main() -> affuse::Result<()> {
    let cfg = TrainConfig::default();
    let model = FusionModel::new(&cfg)?;
    let params: ModelParams = model.init_params(cfg.seed)?;
    println!("default model: {} tensors, {} parameters", params.len(), params.numel());

    let dir = std::env::temp_dir().join("affuse_checkpoint_example");
    std::fs::create_dir_all(&dir).map_err(|e| affuse::Error::io(&dir, e))?;
    let ckpt = dir.join("init.ckpt");
    save_checkpoint(&params, &ckpt)?;
    let loaded = load_for_config(&ckpt, &cfg)?;
    assert_eq!(loaded, params);

    let mut other = cfg.clone();
    other.dk = 32;
    match load_for_config(&ckpt, &other) {
        Err(e) => println!("loading under dk=32 fails as expected: {e}"),
        Ok(_) => unreachable!("shapes differ"),
    }

    let sample = synth_generate(1, 300, 3, 10.0, &cfg.dims)?.remove(0);
    let pred = predict_features(&loaded, &cfg, sample.visual, sample.vggish, sample.logmel)?;
    let out = dir.join("predictions.csv");
    write_predictions(&out, &pred)?;
    println!("wrote {} frames of predictions to {}", pred.rows(), out.display());
    Ok(())
}
