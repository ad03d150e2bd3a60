//! Measures how far back a single-branch TCN looks by perturbing one input
//! frame and watching which outputs change.
//!
//! ```text
//! cargo run --release --example tcn_receptive_field
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use affuse::numerics::Tensor;
use affuse::params::ModelParams;
use affuse::tcn::{receptive_field, tcn_forward, MultiScaleTcn, TcnBranchConfig};

fn main() -> affuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in [3, 5, 7] {
        let cfg = TcnBranchConfig { dropout_p: 0.0, channels: 8, ..TcnBranchConfig::new(k) };
        let tcn = MultiScaleTcn::new("demo", 6, vec![cfg.clone()])?;
        let params: ModelParams<f64> = ModelParams::init(&tcn.parameter_specs(), k as u64)?;

        let t = 80;
        let x = Tensor::new(&[t, 6], (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let mut bumped = x.clone();
        bumped.row_mut(20).iter_mut().for_each(|v| *v += 1.0);
        let y0 = tcn_forward(&tcn, &params, &x, false, &mut rng)?;
        let y1 = tcn_forward(&tcn, &params, &bumped, false, &mut rng)?;
        let moved: Vec<usize> = (0..t).filter(|&r| y0.row(r) != y1.row(r)).collect();

        println!(
            "k={k} dilations {:?}: outputs {}..={} respond to frame 20, measured field {}, formula {}",
            cfg.dilations(),
            moved[0],
            moved[moved.len() - 1],
            moved[moved.len() - 1] - 20 + 1,
            receptive_field(&cfg)
        );
    }
    Ok(())
}
