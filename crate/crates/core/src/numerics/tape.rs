//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its value and the inputs needed for
//! its vector-Jacobian product. [`Tape::backward`] walks the nodes in reverse
//! and accumulates into the persistent gradient of each parameter node.

use rand_chacha::ChaCha8Rng;

use super::ops::{self, LayerNormCache};
use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Parameter,
    Input,
    Intermediate,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Dropout { x: Var, keep: Vec<bool>, p: f64 },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, cache: LayerNormCache<T>, beta: Var },
    Conv1d { x: Var, kernel: Var, bias: Var, dilation: usize },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    /// Scalar loss whose gradient w.r.t. `x` was computed with the value.
    Fused { x: Var, dx: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    role: Role,
    requires_grad: bool,
    op: Op<T>,
}

/// Where dropout keep-masks come from.
///
/// `Replay` feeds back a recorded sequence so that a stochastic forward pass can
/// be re-evaluated with the masks pinned (needed by finite-difference checks).
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Inference: dropout is the identity.
    Off,
    Sample { rng: ChaCha8Rng, record: Option<Vec<Vec<bool>>> },
    Replay { masks: Vec<Vec<bool>>, cursor: usize },
}

impl MaskSource {
    pub fn sample(rng: ChaCha8Rng) -> Self {
        MaskSource::Sample { rng, record: None }
    }

    pub fn recording(rng: ChaCha8Rng) -> Self {
        MaskSource::Sample { rng, record: Some(Vec::new()) }
    }

    /// Converts a recording source into one that replays what it drew.
    pub fn into_replay(self) -> Result<Self> {
        match self {
            MaskSource::Sample { record: Some(masks), .. } => Ok(MaskSource::Replay { masks, cursor: 0 }),
            MaskSource::Replay { masks, .. } => Ok(MaskSource::Replay { masks, cursor: 0 }),
            MaskSource::Off => Ok(MaskSource::Off),
            MaskSource::Sample { record: None, .. } => {
                Err(Error::Contract("mask source was not recording; nothing to replay".into()))
            }
        }
    }

    pub fn is_training(&self) -> bool {
        !matches!(self, MaskSource::Off)
    }

    /// Next keep-mask for `n` elements, or `None` when dropout is inactive.
    pub fn next_mask(&mut self, n: usize, p: f64) -> Result<Option<Vec<bool>>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(None);
        }
        match self {
            MaskSource::Off => Ok(None),
            MaskSource::Sample { rng, record } => {
                let keep = ops::dropout_mask(n, p, rng)?;
                if let Some(rec) = record {
                    rec.push(keep.clone());
                }
                Ok(Some(keep))
            }
            MaskSource::Replay { masks, cursor } => {
                let keep = masks
                    .get(*cursor)
                    .filter(|m| m.len() == n)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("replayed dropout mask {cursor} does not fit {n} elements")))?;
                *cursor += 1;
                Ok(Some(keep))
            }
        }
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, role: Role, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, role, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, Role::Intermediate, rg, op)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Role::Parameter, true, Op::Leaf)
    }

    /// Registers a constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Role::Input, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn role(&self, v: Var) -> Role {
        self.nodes[v.0].role
    }

    /// Accumulated gradient of a parameter, `None` until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a parameter, zeros if never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(y, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose()?;
        Ok(self.derived(y, &[x], Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(format!("add of {:?} and {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.derived(y, &[a, b], Op::Add(a, b)))
    }

    /// `x[.., d] + b[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.shape() != [vx.cols()] {
            return Err(Error::dimension(format!("bias {:?} does not match rows of {:?}", vb.shape(), vx.shape())));
        }
        let mut y = vx.clone();
        let c = vx.cols();
        for row in y.data_mut().chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(vb.data()) {
                *v += bb;
            }
        }
        Ok(self.derived(y, &[x, b], Op::AddRowBias(x, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(format!("mul of {:?} and {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        for (v, &w) in y.data_mut().iter_mut().zip(vb.data()) {
            *v *= w;
        }
        Ok(self.derived(y, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.derived(y, &[x], Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        self.derived(y, &[x], Op::Gelu(x))
    }

    /// Inverted dropout with the mask drawn from (or replayed by) `masks`.
    pub fn dropout(&mut self, x: Var, p: f64, masks: &mut MaskSource) -> Result<Var> {
        let n = self.value(x).len();
        match masks.next_mask(n, p)? {
            None => Ok(x),
            Some(keep) => {
                let y = ops::apply_mask(self.value(x), &keep, p);
                Ok(self.derived(y, &[x], Op::Dropout { x, keep, p }))
            }
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = ops::softmax_rows(self.value(x));
        self.derived(y, &[x], Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) = ops::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.derived(y, &[x, gamma, beta], Op::LayerNorm { x, gamma, cache, beta }))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let y = ops::dilated_conv1d(self.value(x), self.value(kernel), self.value(bias), dilation)?;
        Ok(self.derived(y, &[x, kernel, bias], Op::Conv1d { x, kernel, bias, dilation }))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_features(&vals)?;
        Ok(self.derived(y, parts, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = self.value(x).slice_cols(start, end)?;
        Ok(self.derived(y, &[x], Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.derived(y, &[x], Op::Sum(x))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// w.r.t. `x`. Used for losses with closed-form derivatives.
    pub fn fused_scalar(&mut self, x: Var, value: T, dx: Tensor<T>) -> Result<Var> {
        if dx.shape() != self.value(x).shape() {
            return Err(Error::dimension(format!(
                "fused gradient {:?} does not match input {:?}",
                dx.shape(),
                self.value(x).shape()
            )));
        }
        Ok(self.derived(Tensor::scalar(value), &[x], Op::Fused { x, dx }))
    }

    /// Accumulates `d loss / d parameter` into every reachable parameter's
    /// gradient. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match self.nodes[i].op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    if node.role == Role::Parameter {
                        match node.grad.as_mut() {
                            Some(acc) => acc.add_assign(&g),
                            None => node.grad = Some(g),
                        }
                    }
                }
                _ => {
                    for (v, d) in self.vjp(i, &g)? {
                        accumulate(&mut adj, v, d);
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; va.len()];
                    gemm(T::ONE, g.mat(), vb.mat().t(), T::ZERO, &mut da, va.cols());
                    out.push((*a, Tensor::new(va.shape(), da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; vb.len()];
                    gemm(T::ONE, va.mat().t(), g.mat(), T::ZERO, &mut db, vb.cols());
                    out.push((*b, Tensor::new(vb.shape(), db)?));
                }
            }
            Op::Transpose(x) => out.push((*x, g.transpose()?)),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRowBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let c = g.cols();
                    let mut db = Tensor::zeros(&[c]);
                    for row in g.data().chunks_exact(c) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                for (d, &w) in da.data_mut().iter_mut().zip(vb.data()) {
                    *d *= w;
                }
                let mut db = g.clone();
                for (d, &w) in db.data_mut().iter_mut().zip(va.data()) {
                    *d *= w;
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * *s))),
            Op::Gelu(x) => out.push((*x, ops::gelu_backward(self.value(*x), g))),
            Op::Dropout { x, keep, p } => out.push((*x, ops::apply_mask(g, keep, *p))),
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[node].value;
                out.push((*x, ops::softmax_rows_backward(y, g)));
            }
            Op::LayerNorm { x, gamma, cache, beta } => {
                let (dx, dgamma, dbeta) = ops::layer_norm_backward(cache, self.value(*gamma), g);
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Conv1d { x, kernel, bias, dilation } => {
                let (dx, dk, db) =
                    ops::dilated_conv1d_backward(self.value(*x), self.value(*kernel), *dilation, g, self.needs(*x));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*kernel, dk));
                out.push((*bias, db));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        out.push((p, g.slice_cols(start, start + w)?));
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let (c, w) = (vx.cols(), g.cols());
                let mut dx = Tensor::zeros(vx.shape());
                for r in 0..vx.rows() {
                    dx.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).shape(), g.item()))),
            Op::Fused { x, dx } => {
                let s = g.item();
                out.push((*x, dx.map(|v| v * s)));
            }
        }
        Ok(out.into_iter().filter(|(v, _)| self.needs(*v)).collect())
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match adj[v.0].as_mut() {
        Some(acc) => acc.add_assign(&d),
        None => adj[v.0] = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn half_square_gives_identity_and_accumulates() {
        let mut tape = Tape::<f64>::new();
        let wv = Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let w = tape.param(wv.clone());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &wv);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &wv.map(|v| 2.0 * v));
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::ones(&[2, 3]));
        let w = tape.param(Tensor::full(&[3, 1], 2.0));
        let y = tape.matmul(x, w).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn replayed_masks_repeat_the_draw() {
        let rng = ChaCha8Rng::seed_from_u64(9);
        let mut rec = MaskSource::recording(rng);
        let a = rec.next_mask(50, 0.4).unwrap().unwrap();
        let b = rec.next_mask(20, 0.4).unwrap().unwrap();
        let mut replay = rec.into_replay().unwrap();
        assert_eq!(replay.next_mask(50, 0.4).unwrap().unwrap(), a);
        assert_eq!(replay.next_mask(20, 0.4).unwrap().unwrap(), b);
        assert!(replay.next_mask(20, 0.4).is_err());
        assert!(MaskSource::Off.next_mask(10, 0.5).unwrap().is_none());
    }
}
