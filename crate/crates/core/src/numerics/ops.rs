//! Forward kernels and their vector-Jacobian products.
//!
//! The forward functions are usable on their own; the tape in
//! [`super::tape`] records them and calls the `*_backward` kernels.

use rand::Rng;

use super::tensor::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn expect_matrix<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::dimension(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_matrix(a, "matmul lhs")?;
    let (k2, n) = expect_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::ZERO; m * n];
    gemm(T::ONE, a.mat(), b.mat(), T::ZERO, &mut out, n);
    Tensor::new(&[m, n], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(row[0], T::max);
        let mut total = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for (d, (&yv, &g)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(dyr)) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Normalized rows and reciprocal standard deviations, kept for the backward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_cached<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dimension(format!(
            "layer_norm affine params {:?}/{:?} do not match feature width {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("layer_norm eps must be non-negative, got {eps}")));
    }
    let n = T::from_f64(d as f64);
    let eps = T::from_f64(eps);
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let s = T::ONE / (var + eps).sqrt();
        rstd.push(s);
        for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
            *h = (v - mean) * s;
        }
        let hr = xhat.row(r).to_vec();
        for (i, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = gamma.data()[i] * hr[i] + beta.data()[i];
        }
    }
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Per-row normalization (population variance, `eps` inside the square root)
/// followed by the `gamma`/`beta` affine map.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = dy.cols();
    let n = T::from_f64(d as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let mut dxhat = vec![T::ZERO; d];
    for r in 0..dy.rows() {
        let (h, g) = (cache.xhat.row(r), dy.row(r));
        for i in 0..d {
            dxhat[i] = g[i] * gamma.data()[i];
            dgamma.data_mut()[i] += g[i] * h[i];
            dbeta.data_mut()[i] += g[i];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
        let s = cache.rstd[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (dxhat[i] - mean_d - h[i] * mean_dh);
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    half * x * (T::ONE + u.tanh())
}

#[inline]
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

/// Tanh-approximation GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad_scalar(v);
    }
    dx
}

fn check_drop_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Draws an inverted-dropout keep mask: `true` survives.
pub fn dropout_mask(n: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    check_drop_prob(p)?;
    if p == 0.0 {
        return Ok(vec![true; n]);
    }
    Ok((0..n).map(|_| rng.gen::<f64>() >= p).collect())
}

pub(crate) fn apply_mask<T: Real>(x: &Tensor<T>, keep: &[bool], p: f64) -> Tensor<T> {
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut out = x.clone();
    for (v, &k) in out.data_mut().iter_mut().zip(keep) {
        *v = if k { *v * scale } else { T::ZERO };
    }
    out
}

/// Inverted dropout. Identity when `training` is false or `p == 0`.
pub fn dropout<T: Real>(x: &Tensor<T>, p: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor<T>> {
    check_drop_prob(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = dropout_mask(x.len(), p, rng)?;
    Ok(apply_mask(x, &keep, p))
}

fn conv_dims<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (t, cin) = expect_matrix(x, "conv input")?;
    let &[k, kin, cout] = kernel.shape() else {
        return Err(Error::dimension(format!("conv kernel must be [k, Cin, Cout], got {:?}", kernel.shape())));
    };
    if kin != cin {
        return Err(Error::dimension(format!(
            "conv kernel {:?} expects {kin} input channels, input {:?} has {cin}",
            kernel.shape(),
            x.shape()
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dimension(format!("conv bias {:?} does not match {cout} output channels", bias.shape())));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be positive".into()));
    }
    Ok((t, k, cin, cout))
}

/// Lag in frames applied by kernel tap `j` of a `k`-tap causal kernel.
#[inline]
fn tap_lag(k: usize, j: usize, dilation: usize) -> usize {
    (k - 1 - j) * dilation
}

/// Causal dilated 1-d convolution over time with implicit left zero padding of
/// `(k−1)·dilation` frames: `out[t] = bias + Σ_j x[t − (k−1−j)·dilation] · kernel[j]`.
pub fn dilated_conv1d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (t, k, cin, cout) = conv_dims(x, kernel, bias, dilation)?;
    let mut out = vec![T::ZERO; t * cout];
    for row in out.chunks_exact_mut(cout) {
        row.copy_from_slice(bias.data());
    }
    let xd = x.data();
    for j in 0..k {
        let lag = tap_lag(k, j, dilation);
        if lag >= t {
            continue;
        }
        let rows = t - lag;
        let w = MatRef::row_major(&kernel.data()[j * cin * cout..(j + 1) * cin * cout], cin, cout);
        let xs = MatRef::row_major(&xd[..rows * cin], rows, cin);
        gemm(T::ONE, xs, w, T::ONE, &mut out[lag * cout..], cout);
    }
    Tensor::new(&[t, cout], out)
}

/// Returns `(dx, dkernel, dbias)`; `dx` is skipped when `want_dx` is false.
pub(crate) fn dilated_conv1d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: usize,
    dy: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (t, cin) = (x.rows(), x.cols());
    let (k, cout) = (kernel.shape()[0], kernel.shape()[2]);
    let mut dx = want_dx.then(|| vec![T::ZERO; t * cin]);
    let mut dk = vec![T::ZERO; k * cin * cout];
    let mut db = vec![T::ZERO; cout];
    for row in dy.data().chunks_exact(cout) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    for j in 0..k {
        let lag = tap_lag(k, j, dilation);
        if lag >= t {
            continue;
        }
        let rows = t - lag;
        let g = MatRef::row_major(&dy.data()[lag * cout..], rows, cout);
        let xs = MatRef::row_major(&x.data()[..rows * cin], rows, cin);
        gemm(T::ONE, xs.t(), g, T::ONE, &mut dk[j * cin * cout..(j + 1) * cin * cout], cout);
        if let Some(dx) = dx.as_mut() {
            let w = MatRef::row_major(&kernel.data()[j * cin * cout..(j + 1) * cin * cout], cin, cout);
            gemm(T::ONE, g, w.t(), T::ONE, &mut dx[..rows * cin], cin);
        }
    }
    (
        dx.map(|d| Tensor::new(&[t, cin], d).expect("conv dx shape")),
        Tensor::new(kernel.shape(), dk).expect("conv dk shape"),
        Tensor::new(&[cout], db).expect("conv db shape"),
    )
}

/// Affine map over the last axis: `x·w + b`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (din, dout) = expect_matrix(w, "linear weight")?;
    if x.cols() != din {
        return Err(Error::dimension(format!("linear input {:?} does not match weight {:?}", x.shape(), w.shape())));
    }
    if b.shape() != [dout] {
        return Err(Error::dimension(format!("linear bias {:?} does not match weight {:?}", b.shape(), w.shape())));
    }
    let rows = x.rows();
    let mut out = vec![T::ZERO; rows * dout];
    for row in out.chunks_exact_mut(dout) {
        row.copy_from_slice(b.data());
    }
    gemm(T::ONE, x.mat(), w.mat(), T::ONE, &mut out, dout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out)
}

/// Feature-axis concatenation of `[T, Dᵢ]` parts, preserving order.
pub fn concat_features<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::dimension("concat of zero parts"))?;
    let t = first.rows();
    for p in parts {
        if p.shape().len() != 2 {
            return Err(Error::dimension(format!("concat part must be a matrix, got {:?}", p.shape())));
        }
        if p.rows() != t {
            return Err(Error::dimension(format!(
                "concat parts disagree on time length: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(t * width);
    for r in 0..t {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(&[t, width], data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_cases() {
        let x = t(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0], vec![9.0, 10.0, 11.0, 12.0]]);
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);

        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t(&[vec![0.0], vec![1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);

        let z = Tensor::<f64>::zeros(&[2, 3]);
        let any = Tensor::full(&[3, 4], 7.5);
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[2, 4]));

        let err = matmul(&a, &any).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 4]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&t(&[vec![0.0, 0.0, 0.0]]));
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&t(&[vec![1.0, 2.0, 3.0]]));
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        let shifted = softmax_rows(&t(&[vec![101.0, 102.0, 103.0]]));
        assert!(shifted.max_abs_diff(&s) < 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::<f64>::ones(&[4]);
        let b = Tensor::<f64>::zeros(&[4]);
        let c = layer_norm(&t(&[vec![2.5; 4]]), &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let two = layer_norm(&t(&[vec![1.0, 3.0]]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(two.data(), &[-1.0, 1.0]);

        let beta = Tensor::full(&[4], 0.7);
        let p = layer_norm(&t(&[vec![-3.0; 4]]), &g, &beta, LAYER_NORM_EPS).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.7));

        assert!(layer_norm(&t(&[vec![1.0, 2.0]]), &g, &b, LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn gelu_cases() {
        let v = gelu(&Tensor::<f64>::new(&[3], vec![0.0, 1.0, -10.0]).unwrap());
        assert_eq!(v.data()[0], 0.0);
        // 0.5·(1 + tanh(√(2/π)·1.044715))
        assert!((v.data()[1] - 0.841_191_990_607_477_3).abs() < 1e-12);
        assert!(v.data()[2].abs() < 1e-6);
    }

    #[test]
    fn dropout_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::full(&[5, 4], 2.0);
        assert_eq!(dropout(&x, 0.9, false, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(Error::Config(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let big = Tensor::<f64>::ones(&[100_000]);
        let y = dropout(&big, 0.5, true, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        let mean = y.sum() / 1e5;
        assert!((zeros - 0.5).abs() <= 0.01, "zero fraction {zeros}");
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn conv_cases() {
        // k=1 identity kernel
        let x = t(&[vec![1.0, -2.0], vec![3.0, 0.5], vec![4.0, 4.0]]);
        let ident = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dilated_conv1d(&x, &ident, &Tensor::zeros(&[2]), 3).unwrap(), x);

        let x = Tensor::<f64>::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::ones(&[3, 1, 1]);
        let y = dilated_conv1d(&x, &ones, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0, 9.0]);

        let zero_in = Tensor::<f64>::zeros(&[6, 2]);
        let k = Tensor::full(&[5, 2, 3], 0.3);
        let y = dilated_conv1d(&zero_in, &k, &Tensor::zeros(&[3]), 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let wrong = Tensor::<f64>::ones(&[3, 5, 1]);
        assert!(matches!(dilated_conv1d(&x, &wrong, &Tensor::zeros(&[1]), 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_cases() {
        let x = t(&[vec![1.0, 1.0]]);
        let w = t(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let b = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[1.5, 2.5]);
        assert_eq!(linear(&x, &Tensor::eye(2), &Tensor::zeros(&[2])).unwrap(), x);
        let zero = Tensor::<f64>::zeros(&[3, 2]);
        assert_eq!(linear(&zero, &w, &b).unwrap().data(), &[0.5; 6]);
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::<f32>::full(&[3, 512], 1.0);
        let b = Tensor::<f32>::full(&[3, 128], 2.0);
        let c = Tensor::<f32>::full(&[3, 128], 3.0);
        let cat = concat_features(&[&a, &b, &c]).unwrap();
        assert_eq!(cat.shape(), &[3, 768]);
        assert_eq!(cat.slice_cols(0, 512).unwrap(), a);
        assert_eq!(cat.slice_cols(512, 640).unwrap(), b);
        assert_eq!(cat.slice_cols(640, 768).unwrap(), c);
        assert_eq!(concat_features(&[&a]).unwrap(), a);
        let short = Tensor::<f32>::zeros(&[2, 4]);
        assert!(matches!(concat_features(&[&a, &short]), Err(Error::Dimension(_))));
    }
}
