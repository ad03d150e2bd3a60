//! Per-frame ridge regression from concatenated features to labels: the
//! linear floor the fusion model is expected to beat.

use crate::data::AlignedSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_frames, EvalReport};
use crate::numerics::tensor::{gemm, MatRef};
use crate::numerics::Tensor;

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1.0;

/// Linear map `y = (x − x̄)·W + ȳ` fitted in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    /// `[D, outputs]`.
    pub weights: Tensor<f64>,
}

/// Solves `A·X = B` for symmetric positive definite `A` (`n×n`, row-major) and
/// `B` (`n×m`), in place in `b`.
fn cholesky_solve(mut a: Vec<f64>, n: usize, b: &mut [f64], m: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Contract("ridge system is not positive definite".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for c in 0..m {
        for i in 0..n {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= a[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= a[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / a[i * n + i];
        }
    }
    Ok(())
}

impl RidgeModel {
    /// Fits on rows of `x` (`[N, D]`) against `y` (`[N, M]`), skipping rows
    /// where `mask` is false.
    pub fn fit(x: &Tensor<f64>, y: &Tensor<f64>, mask: &[bool], lambda: f64) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() != mask.len() {
            return Err(Error::dimension(format!("ridge inputs disagree: {} / {} / {} rows", x.rows(), y.rows(), mask.len())));
        }
        if lambda < 0.0 {
            return Err(Error::Config(format!("ridge lambda must be non-negative, got {lambda}")));
        }
        let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if keep.is_empty() {
            return Err(Error::Evaluation("no valid frames to fit".into()));
        }
        let (d, m, n) = (x.cols(), y.cols(), keep.len());
        let mean = |t: &Tensor<f64>| -> Vec<f64> {
            let mut acc = vec![0.0; t.cols()];
            for &i in &keep {
                acc.iter_mut().zip(t.row(i)).for_each(|(a, v)| *a += v);
            }
            acc.into_iter().map(|a| a / n as f64).collect()
        };
        let (x_mean, y_mean) = (mean(x), mean(y));
        let center = |t: &Tensor<f64>, mu: &[f64]| -> Vec<f64> {
            keep.iter().flat_map(|&i| t.row(i).iter().zip(mu).map(|(v, u)| v - u)).collect()
        };
        let (xc, yc) = (center(x, &x_mean), center(y, &y_mean));
        let mut gram = vec![0.0; d * d];
        gemm(1.0, MatRef::row_major(&xc, n, d).t(), MatRef::row_major(&xc, n, d), 0.0, &mut gram, d);
        for i in 0..d {
            gram[i * d + i] += lambda;
        }
        let mut rhs = vec![0.0; d * m];
        gemm(1.0, MatRef::row_major(&xc, n, d).t(), MatRef::row_major(&yc, n, m), 0.0, &mut rhs, m);
        cholesky_solve(gram, d, &mut rhs, m)?;
        Ok(Self { x_mean, y_mean, weights: Tensor::new(&[d, m], rhs)? })
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        if x.cols() != self.x_mean.len() {
            return Err(Error::dimension(format!("ridge expects {} features, got {}", self.x_mean.len(), x.cols())));
        }
        let (d, m) = (x.cols(), self.y_mean.len());
        let xc: Vec<f64> = x.data().chunks(d).flat_map(|r| r.iter().zip(&self.x_mean).map(|(v, u)| v - u)).collect();
        let mut out: Vec<f64> = (0..x.rows()).flat_map(|_| self.y_mean.iter().copied()).collect();
        gemm(1.0, MatRef::row_major(&xc, x.rows(), d), self.weights.mat(), 1.0, &mut out, m);
        Tensor::new(&[x.rows(), m], out)
    }
}

/// Stacks `[visual | vggish | logmel]` rows of several samples, with gold
/// labels and validity mask.
pub fn stack_frames(samples: &[&AlignedSample]) -> Result<(Tensor<f64>, Tensor<f64>, Vec<bool>)> {
    let first = samples.first().ok_or_else(|| Error::Evaluation("no sequences to stack".into()))?;
    let d = first.visual.cols() + first.vggish.cols() + first.logmel.cols();
    let (mut x, mut y, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        if s.visual.cols() + s.vggish.cols() + s.logmel.cols() != d {
            return Err(Error::dimension(format!("sequence {} has inconsistent feature widths", s.sequence_id)));
        }
        for t in 0..s.len() {
            for part in [&s.visual, &s.vggish, &s.logmel] {
                x.extend(part.row(t).iter().map(|&v| f64::from(v)));
            }
        }
        y.extend(s.gold().data().iter().map(|&v| f64::from(v)));
        mask.extend_from_slice(s.mask());
    }
    let n = mask.len();
    Ok((Tensor::new(&[n, d], x)?, Tensor::new(&[n, 2], y)?, mask))
}

/// Fits ridge on `train` and scores it on `val` with clamped predictions.
pub fn ridge_baseline(train: &[&AlignedSample], val: &[&AlignedSample], lambda: f64) -> Result<EvalReport> {
    let (x, y, mask) = stack_frames(train)?;
    let model = RidgeModel::fit(&x, &y, &mask, lambda)?;
    let (xv, yv, mv) = stack_frames(val)?;
    let pred = crate::head::clamp_predictions(&model.predict(&xv)?);
    evaluate_frames(&pred, &yv, &mv)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::FeatureDims;
    use crate::data::synth_generate;

    #[test]
    fn recovers_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[50, 3], (0..150).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = [[0.5, -1.0], [2.0, 0.0], [-0.25, 0.75]];
        let mut y = Tensor::zeros(&[50, 2]);
        for r in 0..50 {
            for c in 0..2 {
                y.row_mut(r)[c] = (0..3).map(|k| x.at(r, k) * w[k][c]).sum::<f64>() + 0.3;
            }
        }
        let m = RidgeModel::fit(&x, &y, &[true; 50], 0.0).unwrap();
        for k in 0..3 {
            for c in 0..2 {
                assert!((m.weights.at(k, c) - w[k][c]).abs() < 1e-10);
            }
        }
        assert!(m.predict(&x).unwrap().max_abs_diff(&y) < 1e-10);
    }

    #[test]
    fn noiseless_synthetic_labels_are_linearly_recoverable() {
        let dims = FeatureDims { visual: 32, vggish: 16, logmel: 16 };
        let data = synth_generate(2, 64, 9, f64::INFINITY, &dims).unwrap();
        let refs: Vec<&AlignedSample> = data.iter().collect();
        let (x, y, mask) = stack_frames(&refs).unwrap();
        let m = RidgeModel::fit(&x, &y, &mask, 1e-9).unwrap();
        let resid = m.predict(&x).unwrap().max_abs_diff(&y);
        assert!(resid < 1e-6, "{resid}");
    }
}
