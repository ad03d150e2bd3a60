//! Regression head: LayerNorm → linear + GELU → dropout → linear, producing
//! per-frame (valence, arousal).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::LAYER_NORM_EPS;
use crate::numerics::{MaskSource, Real, Tape, Tensor, Var};
use crate::params::{BoundParams, Init, ModelParams, ParamSpec};

/// Output columns, in order.
pub const OUTPUTS: [&str; 2] = ["valence", "arousal"];

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    pub name: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout_p: f64,
}

impl RegressionHead {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden: usize, dropout_p: f64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!("head dropout must lie in [0, 1), got {dropout_p}")));
        }
        Ok(Self { name: name.into(), input_dim, hidden, dropout_p })
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let (d, h) = (self.input_dim, self.hidden);
        vec![
            ParamSpec::new(self.key("ln.gamma"), &[d], Init::Ones),
            ParamSpec::new(self.key("ln.beta"), &[d], Init::Zeros),
            ParamSpec::new(self.key("fc1.weight"), &[d, h], Init::FanIn(d)),
            ParamSpec::new(self.key("fc1.bias"), &[h], Init::Zeros),
            ParamSpec::new(self.key("fc2.weight"), &[h, 2], Init::FanIn(h)),
            ParamSpec::new(self.key("fc2.bias"), &[2], Init::Zeros),
        ]
    }

    /// `[T, Dcat] → [T, 2]`, unclamped.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &BoundParams, x: Var, masks: &mut MaskSource) -> Result<Var> {
        if tape.value(x).shape().len() != 2 || tape.value(x).cols() != self.input_dim {
            return Err(Error::dimension(format!(
                "head expects [T, {}] input, got {:?}",
                self.input_dim,
                tape.value(x).shape()
            )));
        }
        let h = tape.layer_norm(x, params.get(&self.key("ln.gamma"))?, params.get(&self.key("ln.beta"))?, LAYER_NORM_EPS)?;
        let h = tape.linear(h, params.get(&self.key("fc1.weight"))?, params.get(&self.key("fc1.bias"))?)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.dropout_p, masks)?;
        tape.linear(h, params.get(&self.key("fc2.weight"))?, params.get(&self.key("fc2.bias"))?)
    }
}

pub fn head_forward<T: Real>(
    head: &RegressionHead,
    params: &ModelParams<T>,
    fcat: &Tensor<T>,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.input(fcat.clone());
    let mut masks = if training { MaskSource::sample(rng.clone()) } else { MaskSource::Off };
    let y = head.forward(&mut tape, &bound, x, &mut masks)?;
    if let MaskSource::Sample { rng: advanced, .. } = masks {
        *rng = advanced;
    }
    Ok(tape.value(y).clone())
}

/// Clamps predictions into the label range `[−1, 1]` for export.
pub fn clamp_predictions<T: Real>(pred: &Tensor<T>) -> Tensor<T> {
    pred.map(|v| v.max(-T::ONE).min(T::ONE))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    fn setup() -> (RegressionHead, ModelParams<f64>, Tensor<f64>) {
        let head = RegressionHead::new("head", 6, 5, 0.3).unwrap();
        let p = ModelParams::init(&head.parameter_specs(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(&[4, 6], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        (head, p, x)
    }

    #[test]
    fn zero_weights_give_zero() {
        let (head, _, x) = setup();
        let p = ModelParams::<f64>::zeros(&head.parameter_specs());
        let y = head_forward(&head, &p, &x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_ignores_rng() {
        let (head, p, x) = setup();
        let a = head_forward(&head, &p, &x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = head_forward(&head, &p, &x, false, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        let c = head_forward(&head, &p, &x, true, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn constant_head() {
        let (head, mut p, x) = setup();
        *p.get_mut("head.fc2.weight").unwrap() = Tensor::zeros(&[5, 2]);
        *p.get_mut("head.fc2.bias").unwrap() = Tensor::new(&[2], vec![0.3, -0.2]).unwrap();
        let y = head_forward(&head, &p, &x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.3, -0.2]);
        }
    }

    #[test]
    fn rows_are_independent() {
        let (head, p, x) = setup();
        let mut x2 = x.clone();
        x2.row_mut(2)[0] += 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = head_forward(&head, &p, &x, false, &mut rng).unwrap();
        let b = head_forward(&head, &p, &x2, false, &mut rng).unwrap();
        for r in [0, 1, 3] {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn clamping() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.7, -3.0]).unwrap();
        assert_eq!(clamp_predictions(&t).data(), &[1.0, -1.0]);
    }
}
