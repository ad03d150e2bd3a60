//! Visual frames attend over an audio stream; prints the attention map and
//! shows what happens when every key is the same.
//!
//! ```text
//! cargo run --release --example cross_modal_attention
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use affuse::fusion::{attend, attention_weights, CrossModalAttention};
use affuse::numerics::Tensor;
use affuse::params::ModelParams;

fn main() -> affuse::Result<()> {
    let att = CrossModalAttention::new("demo", 8, 6, 4, 3, 1)?;
    let mut params: ModelParams<f64> = ModelParams::init(&att.parameter_specs(), 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut random = |r: usize, c: usize| Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let visual = random(5, 8)?;
    let audio = random(5, 6)?;

    let w = &attention_weights(&att, &params, &visual, &audio)?[0];
    println!("attention weights (rows: visual frames, cols: audio frames)");
    for r in 0..w.rows() {
        let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:.3}")).collect();
        println!("  [{}]  sum {:.6}", row.join(" "), w.row(r).iter().sum::<f64>());
    }

    let wk = params.get_mut("demo.wk").expect("key projection");
    *wk = Tensor::zeros(wk.shape());
    let out = attend(&att, &params, &visual, &audio)?;
    println!("with a zero key projection every visual frame receives the mean value row:");
    for r in 0..out.rows() {
        println!("  {:?}", out.row(r).iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }
    Ok(())
}
