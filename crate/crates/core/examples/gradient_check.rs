//! Verifies the hand-written backward pass of the whole network against
//! central finite differences.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use std::time::Instant;

use affuse::config::TrainConfig;
use affuse::model::{model_gradcheck, FusionModel, MODEL_GRADCHECK_STEP};
use affuse::numerics::GradcheckOptions;

fn main() -> affuse::Result<()> {
    let cfg = TrainConfig::tiny();
    println!("tiny model: {} parameters", FusionModel::new(&cfg)?.parameter_count());

    let started = Instant::now();
    let opts = GradcheckOptions { h: MODEL_GRADCHECK_STEP, max_coords_per_tensor: None };
    let report = model_gradcheck(&cfg, 10, 0, opts)?;
    for t in &report.tensors {
        println!("{:<40} {:>4} coords  max rel err {:.2e}", t.name, t.checked, t.max_rel_err);
    }
    println!(
        "overall max rel err {:.2e} over {} coordinates in {:.1}s: {}",
        report.max_rel_err,
        report.checked(),
        started.elapsed().as_secs_f64(),
        if report.passed(1e-6) { "ok" } else { "FAILED" }
    );
    Ok(())
}
