//! Central finite-difference gradient oracle.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { h: DEFAULT_STEP, max_coords_per_tensor: None }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// False when the function is not a pure function of the parameters, e.g.
    /// dropout drawing fresh masks on every evaluation.
    pub valid: bool,
    pub invalid_reason: Option<String>,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.valid && self.max_rel_err < tol
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn coordinates(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let c = c.max(1);
            (0..c).map(|i| i * len / c).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares the analytic gradient returned by `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for each (selected) parameter scalar.
///
/// `f` maps parameter values to `(loss, gradients)`, gradients in the same order
/// as `params`. It is evaluated twice at the base point first; if the two losses
/// differ the report is marked invalid and no comparison is made.
pub fn gradcheck<F>(mut f: F, params: &[(String, Tensor<f64>)], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let theta: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = f(&theta)?;
    gradcheck_with(&analytic, |theta| f(theta).map(|(loss, _)| loss), params, opts)
}

/// Like [`gradcheck`], with the analytic gradients given up front and the
/// loss evaluated by `loss` in any precision `R`. The difference quotient is
/// formed in `R` before rounding to `f64`, so an extended-precision `R` keeps
/// the oracle accurate for gradients far below the loss's rounding error.
pub fn gradcheck_with<L, R>(
    analytic: &[Tensor<f64>],
    mut loss: L,
    params: &[(String, Tensor<f64>)],
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    L: FnMut(&[Tensor<f64>]) -> Result<R>,
    R: Real,
{
    if !(opts.h > 0.0) {
        return Err(Error::Config(format!("gradcheck step must be positive, got {}", opts.h)));
    }
    let mut theta: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    if analytic.len() != theta.len() || analytic.iter().zip(&theta).any(|(g, t)| g.shape() != t.shape()) {
        return Err(Error::Contract("analytic gradients do not match parameter shapes".into()));
    }
    let base = loss(&theta)?;
    let again = loss(&theta)?;
    if base != again {
        return Ok(GradcheckReport {
            valid: false,
            invalid_reason: Some(format!(
                "function is not deterministic ({base} vs {again}); pin stochastic ops such as dropout"
            )),
            max_rel_err: f64::INFINITY,
            tensors: Vec::new(),
        });
    }

    let mut tensors = Vec::with_capacity(theta.len());
    for p in 0..theta.len() {
        let mut check = TensorCheck { name: params[p].0.clone(), checked: 0, max_rel_err: 0.0, worst_index: 0 };
        for i in coordinates(theta[p].len(), opts.max_coords_per_tensor) {
            let orig = theta[p].data()[i];
            theta[p].data_mut()[i] = orig + opts.h;
            let plus = loss(&theta)?;
            theta[p].data_mut()[i] = orig - opts.h;
            let minus = loss(&theta)?;
            theta[p].data_mut()[i] = orig;
            let numeric = ((plus - minus) / R::from_f64(2.0 * opts.h)).to_f64();
            let err = relative_error(analytic[p].data()[i], numeric);
            if err > check.max_rel_err || err.is_nan() {
                check.max_rel_err = err;
                check.worst_index = i;
            }
            check.checked += 1;
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { valid: true, invalid_reason: None, max_rel_err, tensors })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sum_sq(theta: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
        let w = &theta[0];
        let loss = w.data().iter().map(|v| v * v).sum();
        Ok((loss, vec![w.map(|v| 2.0 * v)]))
    }

    #[test]
    fn oracle_self_test() {
        let w = Tensor::new(&[5], vec![0.3, -1.2, 2.5, 0.01, -0.7]).unwrap();
        let report = gradcheck(sum_sq, &[("w".into(), w)], GradcheckOptions::default()).unwrap();
        assert!(report.valid);
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
        assert_eq!(report.checked(), 5);
    }

    #[test]
    fn unpinned_randomness_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let noisy = |theta: &[Tensor<f64>]| {
            let keep = 1.0 + rng.gen::<f64>();
            let (l, g) = sum_sq(theta)?;
            Ok((l * keep, g))
        };
        let report = gradcheck(noisy, &[("w".into(), w)], GradcheckOptions::default()).unwrap();
        assert!(!report.valid);
        assert!(!report.passed(1e-6));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let w = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let wrong = |theta: &[Tensor<f64>]| {
            let (l, g) = sum_sq(theta)?;
            Ok((l, vec![g[0].map(|v| v * 1.01)]))
        };
        let report = gradcheck(wrong, &[("w".into(), w)], GradcheckOptions::default()).unwrap();
        assert!(report.max_rel_err > 1e-3);
    }

    #[test]
    fn coordinate_sampling() {
        assert_eq!(coordinates(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(coordinates(2, Some(3)), vec![0, 1]);
    }
}
