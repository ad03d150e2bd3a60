//! Concordance correlation, the combined score and the CCC loss on a few
//! hand-made sequences.
//!
//! ```text
//! cargo run --example ccc_metrics
//! ```

use affuse::metrics::{ccc, ccc_loss_value, combined_score, evaluate_frames};
use affuse::numerics::Tensor;

fn main() -> affuse::Result<()> {
    let all = |n| vec![true; n];
    let gold = [0.0, 1.0, 2.0];
    println!("ccc(gold, gold)      = {}", ccc(&gold, &gold, &all(3))?);
    println!("ccc(gold, 2·gold)    = {} (8/13 = {})", ccc(&gold, &[0.0, 2.0, 4.0], &all(3))?, 8.0 / 13.0);
    println!("ccc(gold, gold + 1)  = {}", ccc(&gold, &[1.0, 2.0, 3.0], &all(3))?);
    println!("ccc(constant, gold)  = {}", ccc(&[0.5; 3], &gold, &all(3))?);
    println!("masked last frame    = {}", ccc(&[0.0, 1.0, 9.0], &[0.0, 1.0, -9.0], &[true, true, false])?);

    let pred = Tensor::from_rows(&[vec![0.1, 0.3], vec![0.4, 0.1], vec![0.2, -0.2], vec![0.6, 0.0]])?;
    let truth = Tensor::from_rows(&[vec![0.0, 0.4], vec![0.5, 0.2], vec![0.1, -0.3], vec![0.7, -0.1]])?;
    let report = evaluate_frames(&pred, &truth, &all(4))?;
    println!("report: {report}");
    let (loss, _) = ccc_loss_value(&pred, &truth, &all(4))?;
    println!("CCC loss {loss:.6} = 1 − P = {:.6}", 1.0 - report.score_p);
    println!("fold line: {}", combined_score(0.5968, 0.6682, 0, 0).line(2));
    Ok(())
}
