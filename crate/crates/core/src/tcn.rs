//! Multi-scale temporal convolution: parallel causal dilated residual stacks,
//! one per kernel size, concatenated along the feature axis.
//!
//! Each residual block is `conv → GELU → dropout → conv → GELU → dropout`, both
//! convolutions sharing the block's dilation, plus a 1×1 convolution on the
//! skip path when the channel count changes. Block `i` uses dilation
//! `dilation_base^i`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{MaskSource, Real, Tape, Tensor, Var};
use crate::params::{BoundParams, Init, ModelParams, ParamSpec};

pub const DEFAULT_KERNEL_SIZES: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, PartialEq)]
pub struct TcnBranchConfig {
    pub kernel_size: usize,
    pub blocks: usize,
    pub channels: usize,
    pub dilation_base: usize,
    pub dropout_p: f64,
}

impl TcnBranchConfig {
    /// Defaults: 2 blocks, 64 channels, dilation base 2, dropout 0.1.
    pub fn new(kernel_size: usize) -> Self {
        Self { kernel_size, blocks: 2, channels: 64, dilation_base: 2, dropout_p: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.blocks == 0 || self.channels == 0 || self.dilation_base == 0 {
            return Err(Error::Config(format!("invalid TCN branch {self:?}: extents must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("TCN dropout must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.blocks).map(|i| self.dilation_base.pow(i as u32)).collect()
    }
}

/// Frames of history that influence one output frame:
/// `1 + 2·(k−1)·Σᵢ base^i`.
pub fn receptive_field(cfg: &TcnBranchConfig) -> usize {
    1 + 2 * (cfg.kernel_size - 1) * cfg.dilations().iter().sum::<usize>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleTcn {
    /// Parameter-name prefix, e.g. `visual`.
    pub name: String,
    pub input_dim: usize,
    pub branches: Vec<TcnBranchConfig>,
}

impl MultiScaleTcn {
    pub fn new(name: impl Into<String>, input_dim: usize, branches: Vec<TcnBranchConfig>) -> Result<Self> {
        if input_dim == 0 || branches.is_empty() {
            return Err(Error::Config("TCN needs a positive input width and at least one branch".into()));
        }
        for b in &branches {
            b.validate()?;
        }
        Ok(Self { name: name.into(), input_dim, branches })
    }

    /// One branch per default kernel size, all sharing `template`'s other settings.
    pub fn uniform(name: impl Into<String>, input_dim: usize, template: &TcnBranchConfig) -> Result<Self> {
        let branches = DEFAULT_KERNEL_SIZES
            .iter()
            .map(|&k| TcnBranchConfig { kernel_size: k, ..template.clone() })
            .collect();
        Self::new(name, input_dim, branches)
    }

    pub fn output_dim(&self) -> usize {
        self.branches.iter().map(|b| b.channels).sum()
    }

    fn prefix(&self, branch: usize, block: usize) -> String {
        format!("{}.tcn.b{}k{}.block{}", self.name, branch, self.branches[branch].kernel_size, block)
    }

    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (bi, b) in self.branches.iter().enumerate() {
            let mut cin = self.input_dim;
            for block in 0..b.blocks {
                let p = self.prefix(bi, block);
                let (k, c) = (b.kernel_size, b.channels);
                specs.push(ParamSpec::new(format!("{p}.conv1.weight"), &[k, cin, c], Init::FanIn(k * cin)));
                specs.push(ParamSpec::new(format!("{p}.conv1.bias"), &[c], Init::Zeros));
                specs.push(ParamSpec::new(format!("{p}.conv2.weight"), &[k, c, c], Init::FanIn(k * c)));
                specs.push(ParamSpec::new(format!("{p}.conv2.bias"), &[c], Init::Zeros));
                if cin != c {
                    specs.push(ParamSpec::new(format!("{p}.shortcut.weight"), &[1, cin, c], Init::FanIn(cin)));
                    specs.push(ParamSpec::new(format!("{p}.shortcut.bias"), &[c], Init::Zeros));
                }
                cin = c;
            }
        }
        specs
    }

    /// Runs one branch's residual stack.
    pub fn forward_branch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        branch: usize,
        x: Var,
        masks: &mut MaskSource,
    ) -> Result<Var> {
        let b = &self.branches[branch];
        let mut h = x;
        let mut cin = self.input_dim;
        for (block, &dilation) in b.dilations().iter().enumerate() {
            let p = self.prefix(branch, block);
            let y = tape.conv1d(h, params.get(&format!("{p}.conv1.weight"))?, params.get(&format!("{p}.conv1.bias"))?, dilation)?;
            let y = tape.gelu(y);
            let y = tape.dropout(y, b.dropout_p, masks)?;
            let y = tape.conv1d(y, params.get(&format!("{p}.conv2.weight"))?, params.get(&format!("{p}.conv2.bias"))?, dilation)?;
            let y = tape.gelu(y);
            let y = tape.dropout(y, b.dropout_p, masks)?;
            let skip = if cin != b.channels {
                tape.conv1d(h, params.get(&format!("{p}.shortcut.weight"))?, params.get(&format!("{p}.shortcut.bias"))?, 1)?
            } else {
                h
            };
            h = tape.add(y, skip)?;
            cin = b.channels;
        }
        Ok(h)
    }

    /// `[T, D] → [T, ΣCᵢ]`, branch outputs concatenated in configuration order.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        x: Var,
        masks: &mut MaskSource,
    ) -> Result<Var> {
        let width = tape.value(x).cols();
        if tape.value(x).shape().len() != 2 || width != self.input_dim {
            return Err(Error::dimension(format!(
                "{} TCN expects [T, {}] input, got {:?}",
                self.name,
                self.input_dim,
                tape.value(x).shape()
            )));
        }
        let outs = (0..self.branches.len())
            .map(|b| self.forward_branch(tape, params, b, x, masks))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&outs)
    }
}

/// Evaluates a TCN outside of training. `rng` is only consulted when `training`.
pub fn tcn_forward<T: Real>(
    model: &MultiScaleTcn,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.input(x.clone());
    let mut masks = if training { MaskSource::sample(rng.clone()) } else { MaskSource::Off };
    let y = model.forward(&mut tape, &bound, xv, &mut masks)?;
    if let MaskSource::Sample { rng: advanced, .. } = masks {
        *rng = advanced;
    }
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    fn small(k: usize, blocks: usize, channels: usize) -> TcnBranchConfig {
        TcnBranchConfig { kernel_size: k, blocks, channels, dilation_base: 2, dropout_p: 0.0 }
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn model(d: usize) -> (MultiScaleTcn, ModelParams<f64>) {
        let m = MultiScaleTcn::uniform("v", d, &small(3, 2, 4)).unwrap();
        let p = ModelParams::init(&m.parameter_specs(), 11).unwrap();
        (m, p)
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(&TcnBranchConfig::new(3)), 13);
        assert_eq!(receptive_field(&TcnBranchConfig::new(7)), 37);
        assert_eq!(receptive_field(&TcnBranchConfig { blocks: 5, ..TcnBranchConfig::new(1) }), 1);
    }

    #[test]
    fn single_frame_input() {
        let (m, p) = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tcn_forward(&m, &p, &random_input(1, 5, 1), false, &mut rng).unwrap();
        assert_eq!(y.shape(), &[1, 12]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let (m, p) = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tcn_forward(&m, &p, &Tensor::zeros(&[9, 5]), false, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn future_perturbation_leaves_past_untouched() {
        let (m, p) = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(12, 5, 2);
        let mut x2 = x.clone();
        for v in x2.row_mut(7) {
            *v += 0.5;
        }
        let a = tcn_forward(&m, &p, &x, false, &mut rng).unwrap();
        let b = tcn_forward(&m, &p, &x2, false, &mut rng).unwrap();
        assert_eq!(a.slice_rows(0, 7).unwrap(), b.slice_rows(0, 7).unwrap());
        assert_ne!(a.row(7), b.row(7));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let (m, p) = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = tcn_forward(&m, &p, &random_input(4, 6, 1), false, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn shortcut_only_on_channel_change() {
        let m = MultiScaleTcn::new("a", 4, vec![small(3, 2, 4)]).unwrap();
        assert!(!m.parameter_specs().iter().any(|s| s.name.contains("shortcut")));
        let m = MultiScaleTcn::new("a", 6, vec![small(3, 2, 4)]).unwrap();
        let n = m.parameter_specs().iter().filter(|s| s.name.contains("shortcut")).count();
        assert_eq!(n, 2);
    }
}
