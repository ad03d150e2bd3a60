//! Cross-modal attention: visual features query an audio stream.
//!
//! `Q = visual·wq`, `K = audio·wk`, `V = audio·wv`, output
//! `softmax_rows(Q·Kᵀ/√dk)·V`, attending over every audio frame. With several
//! heads the projections are split column-wise and the per-head outputs
//! concatenated.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{BoundParams, Init, ModelParams, ParamSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalAttention {
    /// Parameter-name prefix, e.g. `fusion.vggish`.
    pub name: String,
    pub query_dim: usize,
    pub key_dim: usize,
    pub dk: usize,
    pub dv_out: usize,
    pub heads: usize,
}

impl CrossModalAttention {
    pub fn new(name: impl Into<String>, query_dim: usize, key_dim: usize, dk: usize, dv_out: usize, heads: usize) -> Result<Self> {
        if query_dim == 0 || key_dim == 0 || dk == 0 || dv_out == 0 || heads == 0 {
            return Err(Error::Config("attention extents must be positive".into()));
        }
        if !dk.is_multiple_of(heads) || !dv_out.is_multiple_of(heads) {
            return Err(Error::Config(format!("dk={dk} and dv_out={dv_out} must be divisible by heads={heads}")));
        }
        Ok(Self { name: name.into(), query_dim, key_dim, dk, dv_out, heads })
    }

    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{}.wq", self.name), &[self.query_dim, self.dk], Init::FanIn(self.query_dim)),
            ParamSpec::new(format!("{}.wk", self.name), &[self.key_dim, self.dk], Init::FanIn(self.key_dim)),
            ParamSpec::new(format!("{}.wv", self.name), &[self.key_dim, self.dv_out], Init::FanIn(self.key_dim)),
        ]
    }

    fn check_inputs<T: Real>(&self, visual: &Tensor<T>, audio: &Tensor<T>) -> Result<()> {
        if visual.shape().len() != 2 || audio.shape().len() != 2 {
            return Err(Error::dimension("attention inputs must be [T, D] matrices"));
        }
        if visual.rows() != audio.rows() {
            return Err(Error::Alignment(format!(
                "{}: visual has {} frames, audio has {}",
                self.name,
                visual.rows(),
                audio.rows()
            )));
        }
        if visual.cols() != self.query_dim || audio.cols() != self.key_dim {
            return Err(Error::dimension(format!(
                "{} expects widths ({}, {}), got visual {:?} and audio {:?}",
                self.name,
                self.query_dim,
                self.key_dim,
                visual.shape(),
                audio.shape()
            )));
        }
        Ok(())
    }

    /// Records the attention and returns `(output, per-head attention weights)`.
    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        visual: Var,
        audio: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_inputs(tape.value(visual), tape.value(audio))?;
        let q = tape.matmul(visual, params.get(&format!("{}.wq", self.name))?)?;
        let k = tape.matmul(audio, params.get(&format!("{}.wk", self.name))?)?;
        let v = tape.matmul(audio, params.get(&format!("{}.wv", self.name))?)?;
        let (hk, hv) = (self.dk / self.heads, self.dv_out / self.heads);
        let scale = T::from_f64(1.0 / (hk as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hk, (h + 1) * hk)?,
                    tape.slice_cols(k, h * hk, (h + 1) * hk)?,
                    tape.slice_cols(v, h * hv, (h + 1) * hv)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let a = tape.softmax_rows(logits);
            weights.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let out = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
        Ok((out, weights))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &BoundParams, visual: Var, audio: Var) -> Result<Var> {
        self.forward_with_weights(tape, params, visual, audio).map(|(o, _)| o)
    }
}

/// Stand-alone attention evaluation: `[T, Dv] × [T, Da] → [T, dv_out]`.
pub fn attend<T: Real>(
    att: &CrossModalAttention,
    params: &ModelParams<T>,
    visual: &Tensor<T>,
    audio: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (v, a) = (tape.input(visual.clone()), tape.input(audio.clone()));
    let out = att.forward(&mut tape, &bound, v, a)?;
    Ok(tape.value(out).clone())
}

/// Attention weight matrices (one per head) for inspection.
pub fn attention_weights<T: Real>(
    att: &CrossModalAttention,
    params: &ModelParams<T>,
    visual: &Tensor<T>,
    audio: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (v, a) = (tape.input(visual.clone()), tape.input(audio.clone()));
    let (_, w) = att.forward_with_weights(&mut tape, &bound, v, a)?;
    Ok(w.into_iter().map(|w| tape.value(w).clone()).collect())
}

/// `[vtcn; attend(vtcn, vgg); attend(vtcn, lm)]` along the feature axis.
pub fn fuse_all<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    vtcn: Var,
    vgg_tcn: Var,
    lm_tcn: Var,
    att_vgg: &CrossModalAttention,
    att_lm: &CrossModalAttention,
) -> Result<Var> {
    let a = att_vgg.forward(tape, params, vtcn, vgg_tcn)?;
    let b = att_lm.forward(tape, params, vtcn, lm_tcn)?;
    tape.concat(&[vtcn, a, b])
}

/// Output width of [`fuse_all`].
pub fn fused_width(visual_width: usize, att_vgg: &CrossModalAttention, att_lm: &CrossModalAttention) -> usize {
    visual_width + att_vgg.dv_out + att_lm.dv_out
}
