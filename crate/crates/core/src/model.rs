//! The full fusion network: three multi-scale TCNs, two cross-modal attention
//! modules and the regression head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::AlignedSample;
use crate::error::{Error, Result};
use crate::fusion::{fuse_all, fused_width, CrossModalAttention};
use crate::head::RegressionHead;
use crate::metrics::{ccc_loss, ccc_loss_in};
use crate::numerics::{gradcheck_with, DoubleDouble, GradcheckOptions, GradcheckReport, MaskSource, Real, Tape, Tensor, Var};
use crate::params::{BoundParams, ModelParams, ParamSpec};
use crate::tcn::MultiScaleTcn;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub visual: MultiScaleTcn,
    pub vggish: MultiScaleTcn,
    pub logmel: MultiScaleTcn,
    pub att_vggish: CrossModalAttention,
    pub att_logmel: CrossModalAttention,
    pub head: RegressionHead,
}

impl FusionModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let visual = MultiScaleTcn::new("visual", cfg.dims.visual, cfg.tcn.clone())?;
        let vggish = MultiScaleTcn::new("vggish", cfg.dims.vggish, cfg.tcn.clone())?;
        let logmel = MultiScaleTcn::new("logmel", cfg.dims.logmel, cfg.tcn.clone())?;
        let width = visual.output_dim();
        let att_vggish = CrossModalAttention::new("fusion.vggish", width, vggish.output_dim(), cfg.dk, cfg.dv_out, cfg.heads)?;
        let att_logmel = CrossModalAttention::new("fusion.logmel", width, logmel.output_dim(), cfg.dk, cfg.dv_out, cfg.heads)?;
        let head = RegressionHead::new("head", fused_width(width, &att_vggish, &att_logmel), cfg.hidden, cfg.head_dropout)?;
        Ok(Self { visual, vggish, logmel, att_vggish, att_logmel, head })
    }

    /// All parameters in initialization order.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.visual.parameter_specs();
        specs.extend(self.vggish.parameter_specs());
        specs.extend(self.logmel.parameter_specs());
        specs.extend(self.att_vggish.parameter_specs());
        specs.extend(self.att_logmel.parameter_specs());
        specs.extend(self.head.parameter_specs());
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ModelParams<T>> {
        ModelParams::init(&self.parameter_specs(), seed)
    }

    pub fn check_sample(&self, sample: &AlignedSample) -> Result<()> {
        for (what, t, want) in [
            ("visual", &sample.visual, self.visual.input_dim),
            ("vggish", &sample.vggish, self.vggish.input_dim),
            ("logmel", &sample.logmel, self.logmel.input_dim),
        ] {
            if t.cols() != want {
                return Err(Error::dimension(format!("{what} features of {} are {} wide, model expects {want}", sample.sequence_id, t.cols())));
            }
        }
        Ok(())
    }

    /// Records the whole network on `tape`; returns the `[T, 2]` prediction.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        visual: Var,
        vggish: Var,
        logmel: Var,
        masks: &mut MaskSource,
    ) -> Result<Var> {
        let v = self.visual.forward(tape, params, visual, masks)?;
        let a1 = self.vggish.forward(tape, params, vggish, masks)?;
        let a2 = self.logmel.forward(tape, params, logmel, masks)?;
        let fused = fuse_all(tape, params, v, a1, a2, &self.att_vggish, &self.att_logmel)?;
        self.head.forward(tape, params, fused, masks)
    }

    /// Records the forward pass for `sample` with inputs cast to `T`.
    pub fn forward_sample<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        sample: &AlignedSample,
        masks: &mut MaskSource,
    ) -> Result<Var> {
        self.check_sample(sample)?;
        let v = tape.input(sample.visual.cast());
        let a1 = tape.input(sample.vggish.cast());
        let a2 = tape.input(sample.logmel.cast());
        self.forward(tape, params, v, a1, a2, masks)
    }
}

/// Unclamped `[T, 2]` predictions for one window. With `training`, dropout
/// masks are drawn from `rng`, which is advanced; otherwise `rng` is untouched.
pub fn model_forward<T: Real>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    sample: &AlignedSample,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let model = FusionModel::new(cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut masks = if training { MaskSource::sample(rng.clone()) } else { MaskSource::Off };
    let y = model.forward_sample(&mut tape, &bound, sample, &mut masks)?;
    if let MaskSource::Sample { rng: advanced, .. } = masks {
        *rng = advanced;
    }
    Ok(tape.value(y).clone())
}

/// Finite-difference step for [`model_gradcheck`]; double-double evaluation
/// makes roundoff negligible, so the step only bounds truncation error.
pub const MODEL_GRADCHECK_STEP: f64 = 1e-6;

/// Finite-difference check of every parameter gradient of the full model and
/// CCC loss on random inputs of `frames` frames.
///
/// Analytic gradients come from the `f64` tape. The finite-difference side
/// re-evaluates the forward pass and loss in double-double, so the check
/// resolves gradients many orders of magnitude below the loss value.
///
/// Dropout stays active but its masks are drawn once and replayed on every
/// evaluation, so the loss is a deterministic function of the parameters.
pub fn model_gradcheck(cfg: &TrainConfig, frames: usize, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let model = FusionModel::new(cfg)?;
    let params: ModelParams<f64> = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut random = |rows: usize, cols: usize| {
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
    };
    let inputs = [random(frames, cfg.dims.visual), random(frames, cfg.dims.vggish), random(frames, cfg.dims.logmel)];
    let gold = random(frames, 2);
    let mask = vec![true; frames];

    fn record<T: Real>(
        model: &FusionModel,
        names: &ModelParams<f64>,
        values: &[Tensor<f64>],
        inputs: &[Tensor<f64>; 3],
        masks: &mut MaskSource,
    ) -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let bound: Vec<Var> = values.iter().map(|v| tape.param(v.cast())).collect();
        let named = BoundParams::from_pairs(names.names().zip(bound.iter().copied()));
        let [v, a1, a2] = inputs.clone().map(|t| tape.input(t.cast()));
        let pred = model.forward(&mut tape, &named, v, a1, a2, masks)?;
        Ok((tape, bound, pred))
    }

    let start: Vec<(String, Tensor<f64>)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let values: Vec<Tensor<f64>> = start.iter().map(|(_, t)| t.clone()).collect();
    let mut recorder = MaskSource::recording(ChaCha8Rng::seed_from_u64(seed));
    let (mut tape, bound, pred) = record::<f64>(&model, &params, &values, &inputs, &mut recorder)?;
    let replay = recorder.into_replay()?;
    let loss = ccc_loss(&mut tape, pred, &gold, &mask)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = bound.iter().map(|&b| tape.grad_or_zeros(b)).collect();

    let gold_dd: Tensor<DoubleDouble> = gold.cast();
    let loss_dd = |theta: &[Tensor<f64>]| -> Result<DoubleDouble> {
        let (tape, _, pred) = record::<DoubleDouble>(&model, &params, theta, &inputs, &mut replay.clone())?;
        ccc_loss_in(tape.value(pred), &gold_dd, &mask)
    };
    gradcheck_with(&analytic, loss_dd, &start, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn default_widths() {
        let cfg = TrainConfig::default();
        let m = FusionModel::new(&cfg).unwrap();
        assert_eq!(m.visual.output_dim(), 192);
        assert_eq!(m.head.input_dim, 320);
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = TrainConfig::tiny();
        let m = FusionModel::new(&cfg).unwrap();
        let p: ModelParams = m.init_params(0).unwrap();
        assert_eq!(p.numel(), m.parameter_count());
        // per branch: block0 conv1 k·d·4+4, conv2 k·16+4, a 1×1 shortcut only when d ≠ 4; block1 2·(k·16+4)
        let tcn = |d: usize| -> usize {
            let shortcut = if d == 4 { 0 } else { d * 4 + 4 };
            [3, 5, 7].iter().map(|k| k * d * 4 + 4 + k * 16 + 4 + shortcut + 2 * (k * 16 + 4)).sum()
        };
        let att = 12 * 4 * 3;
        let head = 2 * 20 + 20 * 8 + 8 + 8 * 2 + 2;
        assert_eq!(m.parameter_count(), tcn(8) + 2 * tcn(4) + 2 * att + head);
        let mut bigger = cfg.clone();
        bigger.hidden = 9;
        assert_eq!(FusionModel::new(&bigger).unwrap().parameter_count(), m.parameter_count() + 20 + 1 + 2);
    }

    #[test]
    fn shapes_zero_params_and_determinism() {
        let cfg = TrainConfig::tiny();
        let sample = &synth_generate(1, 40, 0, 10.0, &cfg.dims).unwrap()[0];
        let m = FusionModel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let zeros = ModelParams::<f32>::zeros(&m.parameter_specs());
        let y = model_forward(&zeros, &cfg, sample, false, &mut rng).unwrap();
        assert_eq!(y.shape(), &[40, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let p: ModelParams = m.init_params(3).unwrap();
        let a = model_forward(&p, &cfg, sample, false, &mut rng).unwrap();
        let b = model_forward(&p, &cfg, sample, false, &mut rng).unwrap();
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(model_forward(&p, &cfg, sample, true, &mut r1).unwrap(), model_forward(&p, &cfg, sample, true, &mut r2).unwrap());
    }

    #[test]
    fn rejects_wrong_widths() {
        let cfg = TrainConfig::tiny();
        let mut other = cfg.clone();
        other.dims.vggish = 5;
        let sample = &synth_generate(1, 40, 0, 10.0, &other.dims).unwrap()[0];
        let p: ModelParams = FusionModel::new(&cfg).unwrap().init_params(0).unwrap();
        let err = model_forward(&p, &cfg, sample, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let report = model_gradcheck(&TrainConfig::tiny(), 10, 0, GradcheckOptions { h: MODEL_GRADCHECK_STEP, ..Default::default() }).unwrap();
        assert!(report.valid);
        let worst = report.worst().unwrap();
        assert!(report.passed(1e-6), "max rel err {} in {}[{}]", report.max_rel_err, worst.name, worst.worst_index);
    }
}
