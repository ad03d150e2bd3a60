use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction. Moments are kept in `f64` per parameter element.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &ModelParams<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must list the same tensors in the same order.
    pub fn step<T: Real>(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract("gradient set does not match the optimizer's parameters".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, ((name, p), (gname, g))) in params.iter_mut().zip(grads.iter()).enumerate() {
            if name != gname || p.len() != g.len() {
                return Err(Error::Contract(format!("gradient {gname} does not match parameter {name}")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gv.to_f64();
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let update = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                *pv = T::from_f64(pv.to_f64() - update);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient element.
pub fn global_norm<T: Real>(grads: &ModelParams<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::from_f64(v.to_f64() * scale));
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn toy(values: &[f64]) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_steps_match_closed_form() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = toy(&[0.5, -1.5]);
        let mut adam = Adam::new(cfg, &p);
        let g1 = [0.2, -3.0];
        adam.step(&mut p, &toy(&g1)).unwrap();
        // step 1: m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        for (k, start) in [0.5, -1.5].iter().enumerate() {
            let expect = start - 0.01 * g1[k] / (g1[k].abs() + 1e-8);
            assert!((p.get("w").unwrap().data()[k] - expect).abs() < 1e-12);
        }
        let before = p.get("w").unwrap().data().to_vec();
        let g2 = [-0.1, 1.0];
        adam.step(&mut p, &toy(&g2)).unwrap();
        for k in 0..2 {
            let m = 0.9 * 0.1 * g1[k] + 0.1 * g2[k];
            let v = 0.999 * 0.001 * g1[k] * g1[k] + 0.001 * g2[k] * g2[k];
            let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
            let expect = before[k] - 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("w").unwrap().data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = AdamConfig { lr: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = ModelParams::<f32>::new();
        p.insert("w", Tensor::new(&[3], vec![0.1, -0.7, 3.3]).unwrap()).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(cfg, &p);
        let mut g = ModelParams::<f32>::new();
        g.insert("w", Tensor::new(&[3], vec![5.0, -1.0, 1e-3]).unwrap()).unwrap();
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = toy(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!(global_norm(&g) <= 1.0 + 1e-9);
        let mut small = toy(&[0.3, 0.4]);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, toy(&[0.3, 0.4]));
    }
}
