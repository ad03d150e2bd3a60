//! Concordance correlation coefficient, the combined valence/arousal score and
//! the CCC training loss.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Denominators below this are treated as degenerate.
pub const DEGENERATE_DENOM: f64 = 1e-12;

/// Population first and second moments of the valid pairs.
#[derive(Debug, Clone, Copy)]
struct Moments {
    n: usize,
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

/// Two-pass moments: means first, then centered sums. Every expression is
/// symmetric in `x` and `y`, so swapping the arguments is bit-exact.
fn moments<T: Real>(x: &[T], y: &[T], mask: &[bool]) -> Moments {
    let valid = || x.iter().zip(y).zip(mask).filter(|(_, &ok)| ok).map(|((&a, &b), _)| (a.to_f64(), b.to_f64()));
    let n = valid().count();
    let nf = n as f64;
    let (sx, sy) = valid().fold((0.0, 0.0), |(sx, sy), (a, b)| (sx + a, sy + b));
    let (mean_x, mean_y) = (sx / nf, sy / nf);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in valid() {
        let (da, db) = (a - mean_x, b - mean_y);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    Moments { n, mean_x, mean_y, var_x: sxx / nf, var_y: syy / nf, cov: sxy / nf }
}

fn check_lengths(a: usize, b: usize, m: usize) -> Result<()> {
    if a != b || a != m {
        return Err(Error::Evaluation(format!("sequence lengths differ: pred {a}, gold {b}, mask {m}")));
    }
    Ok(())
}

/// Lin's concordance correlation coefficient over the frames where `mask` is set:
/// `2·cov(x,y) / (var(x) + var(y) + (μx − μy)²)` with population moments.
///
/// When the denominator is below [`DEGENERATE_DENOM`] the result is 1 if the
/// masked sequences are identical and 0 otherwise.
pub fn ccc<T: Real>(pred: &[T], gold: &[T], mask: &[bool]) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), mask.len())?;
    let m = moments(pred, gold, mask);
    if m.n == 0 {
        return Err(Error::Evaluation("no valid frames to score".into()));
    }
    let d = m.mean_x - m.mean_y;
    let denom = m.var_x + m.var_y + d * d;
    if denom < DEGENERATE_DENOM {
        let same = pred.iter().zip(gold).zip(mask).filter(|(_, &ok)| ok).all(|((a, b), _)| a == b);
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((2.0 * m.cov / denom).clamp(-1.0, 1.0))
}

/// Per-fold evaluation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub score_p: f64,
    pub frames_used: usize,
    pub frames_masked: usize,
}

impl EvalReport {
    /// `fold,ccc_valence,ccc_arousal,P` with four decimals.
    pub fn line(&self, fold: usize) -> String {
        format!("{fold},{:.4},{:.4},{:.4}", self.ccc_valence, self.ccc_arousal, self.score_p)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CCC valence {:.4}, CCC arousal {:.4}, P {:.4} ({} frames, {} masked)",
            self.ccc_valence, self.ccc_arousal, self.score_p, self.frames_used, self.frames_masked
        )
    }
}

/// `P = 0.5·(CCC_valence + CCC_arousal)`.
pub fn combined_score(ccc_valence: f64, ccc_arousal: f64, frames_used: usize, frames_masked: usize) -> EvalReport {
    EvalReport { ccc_valence, ccc_arousal, score_p: 0.5 * (ccc_valence + ccc_arousal), frames_used, frames_masked }
}

/// Scores `[T, 2]` predictions (valence, arousal) against gold over valid frames.
pub fn evaluate_frames<T: Real>(pred: &Tensor<T>, gold: &Tensor<T>, mask: &[bool]) -> Result<EvalReport> {
    if pred.shape() != gold.shape() || pred.cols() != 2 {
        return Err(Error::Evaluation(format!(
            "prediction {:?} and gold {:?} must both be [T, 2]",
            pred.shape(),
            gold.shape()
        )));
    }
    let column = |t: &Tensor<T>, c: usize| (0..t.rows()).map(|r| t.at(r, c)).collect::<Vec<_>>();
    let cv = ccc(&column(pred, 0), &column(gold, 0), mask)?;
    let ca = ccc(&column(pred, 1), &column(gold, 1), mask)?;
    let used = mask.iter().filter(|&&m| m).count();
    Ok(combined_score(cv, ca, used, mask.len() - used))
}

/// Value and gradient (w.r.t. `pred`) of `1 − 0.5·(CCC_v + CCC_a)`.
pub fn ccc_loss_value<T: Real>(pred: &Tensor<T>, gold: &Tensor<T>, mask: &[bool]) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != gold.shape() || pred.shape().len() != 2 || pred.cols() != 2 {
        return Err(Error::dimension(format!(
            "ccc_loss expects matching [T, 2] tensors, got {:?} and {:?}",
            pred.shape(),
            gold.shape()
        )));
    }
    let rows = pred.rows();
    if mask.len() != rows {
        return Err(Error::dimension(format!("mask of {} frames for {rows} predictions", mask.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("{n} valid frames; need at least 2")));
    }
    let nf = n as f64;
    let mut grad = Tensor::<T>::zeros(pred.shape());
    let mut total = 0.0;
    for dim in 0..2 {
        let x: Vec<T> = (0..rows).map(|r| pred.at(r, dim)).collect();
        let y: Vec<T> = (0..rows).map(|r| gold.at(r, dim)).collect();
        let m = moments(&x, &y, mask);
        if m.var_y < DEGENERATE_DENOM {
            return Err(Error::DegenerateBatch(format!("gold column {dim} is constant over the window")));
        }
        let diff = m.mean_x - m.mean_y;
        let denom = m.var_x + m.var_y + diff * diff;
        total += 2.0 * m.cov / denom;
        for r in (0..rows).filter(|&r| mask[r]) {
            let (xr, yr) = (x[r].to_f64(), y[r].to_f64());
            let dcov = (yr - m.mean_y) / nf;
            let ddenom = 2.0 * ((xr - m.mean_x) + diff) / nf;
            let dccc = 2.0 * (dcov * denom - m.cov * ddenom) / (denom * denom);
            grad.data_mut()[r * 2 + dim] = T::from_f64(-0.5 * dccc);
        }
    }
    Ok((1.0 - 0.5 * total, grad))
}

/// `1 − 0.5·(CCC_v + CCC_a)` evaluated entirely in `T`, without the `f64`
/// intermediate [`ccc_loss_value`] uses. Meant for extended-precision scalars.
pub fn ccc_loss_in<T: Real>(pred: &Tensor<T>, gold: &Tensor<T>, mask: &[bool]) -> Result<T> {
    if pred.shape() != gold.shape() || pred.shape().len() != 2 || pred.cols() != 2 || mask.len() != pred.rows() {
        return Err(Error::dimension(format!("ccc_loss expects matching [T, 2] tensors and mask, got {:?} and {:?}", pred.shape(), gold.shape())));
    }
    let rows: Vec<usize> = (0..pred.rows()).filter(|&r| mask[r]).collect();
    if rows.len() < 2 {
        return Err(Error::DegenerateBatch(format!("{} valid frames; need at least 2", rows.len())));
    }
    let nf = T::from_f64(rows.len() as f64);
    let two = T::from_f64(2.0);
    let mut total = T::ZERO;
    for dim in 0..2 {
        let mean = |t: &Tensor<T>| rows.iter().map(|&r| t.at(r, dim)).sum::<T>() / nf;
        let (mx, my) = (mean(pred), mean(gold));
        let (mut sxx, mut syy, mut sxy) = (T::ZERO, T::ZERO, T::ZERO);
        for &r in &rows {
            let (dx, dy) = (pred.at(r, dim) - mx, gold.at(r, dim) - my);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        let diff = mx - my;
        total += two * (sxy / nf) / (sxx / nf + syy / nf + diff * diff);
    }
    Ok(T::ONE - total / two)
}

/// Records the CCC loss of `pred` ([T, 2] on the tape) against fixed gold labels.
///
/// Windows with fewer than two valid frames or constant gold in either
/// dimension yield [`Error::DegenerateBatch`]; the trainer skips those.
pub fn ccc_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gold: &Tensor<T>, mask: &[bool]) -> Result<Var> {
    let (value, grad) = ccc_loss_value(tape.value(pred), gold, mask)?;
    tape.fused_scalar(pred, T::from_f64(value), grad)
}
