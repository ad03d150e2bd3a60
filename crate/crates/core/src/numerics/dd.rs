//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s with
//! roughly 106 bits of significand.
//!
//! Only the finite-difference oracle uses it. Evaluating the loss this way
//! removes the cancellation error of `f(θ+h) − f(θ−h)`, which in plain `f64`
//! swamps gradients near 1e-7.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use super::tensor::num_like::FloatOps;
use super::tensor::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DoubleDouble = DoubleDouble { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };
const SPLITTER: f64 = 134217729.0; // 2^27 + 1

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn split(a: f64) -> (f64, f64) {
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl DoubleDouble {
    pub const fn new(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    #[inline]
    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    #[inline]
    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        Self::norm(p, e + self.lo * b)
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self { hi: self.hi * s, lo: self.lo * s }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    #[inline]
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::norm(s, e + f)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    #[inline]
    fn sub(self, b: Self) -> Self {
        self + -b
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        Self::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        Self::norm(q1, q2) + Self::new(q3)
    }
}

impl AddAssign for DoubleDouble {
    fn add_assign(&mut self, b: Self) {
        *self = *self + b;
    }
}

impl SubAssign for DoubleDouble {
    fn sub_assign(&mut self, b: Self) {
        *self = *self - b;
    }
}

impl MulAssign for DoubleDouble {
    fn mul_assign(&mut self, b: Self) {
        *self = *self * b;
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            ord => ord,
        }
    }
}

impl Sum for DoubleDouble {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e}{:+e}", self.hi, self.lo)
    }
}

impl FloatOps for DoubleDouble {
    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::default();
        }
        // x = k·ln2 + r, then exp(r) = (1 + expm1(r / 2^9))^(2^9)
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2.mul_f64(k)).ldexp(-9);
        let mut term = r;
        let mut s = r;
        for n in 2..=10 {
            term = term * r / Self::new(n as f64);
            s += term;
        }
        for _ in 0..9 {
            s = s.ldexp(1) + s * s;
        }
        (s + Self::new(1.0)).ldexp(k as i32)
    }

    fn tanh(self) -> Self {
        let a = self.abs();
        if a.hi > 40.0 {
            return Self::new(self.hi.signum());
        }
        let e = (a.ldexp(1)).exp();
        let t = Self::new(1.0) - Self::new(2.0) / (e + Self::new(1.0));
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::new(self.hi.sqrt());
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let ax2 = Self::new(ax) * Self::new(ax);
        Self::new(ax) + Self::new((self - ax2).hi * (x * 0.5))
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }
}

impl Real for DoubleDouble {
    const ZERO: Self = Self::new(0.0);
    const ONE: Self = Self::new(1.0);

    fn from_f64(v: f64) -> Self {
        Self::new(v)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = Self::ZERO;
                for l in 0..k as isize {
                    acc += *a.offset(i * rsa + l * csa) * *b.offset(l * rsb + j * csb);
                }
                let cij = c.offset(i * rsc + j * csc);
                *cij = if beta == Self::ZERO { alpha * acc } else { alpha * acc + beta * *cij };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(v: f64) -> DoubleDouble {
        DoubleDouble::new(v)
    }

    #[test]
    fn arithmetic_keeps_the_low_word() {
        let third = dd(1.0) / dd(3.0);
        let back = third * dd(3.0) - dd(1.0);
        assert!(back.to_f64().abs() < 1e-31, "{back}");
        let tiny = dd(1.0) + dd(1e-20) - dd(1.0);
        assert!((tiny.to_f64() - 1e-20).abs() < 1e-35);
    }

    #[test]
    fn exp_and_sqrt_agree_with_identities() {
        for x in [-30.0, -2.5, -1e-3, 0.0, 0.37, 1.0, 12.25] {
            let e = dd(x).exp();
            assert!((e.to_f64() - f64::exp(x)).abs() <= 4.0 * f64::EPSILON * f64::exp(x), "exp({x})");
            let prod = e * dd(-x).exp() - dd(1.0);
            assert!(prod.to_f64().abs() < 1e-29, "exp({x})·exp(-{x}) − 1 = {prod}");
        }
        let e = dd(1.0).exp();
        // e = 2.718281828459045 + 1.4456468917292502e-16
        assert!((e.lo - 1.4456468917292502e-16).abs() < 1e-31);
        for x in [2.0, 0.5, 1e-8, 123.456] {
            let r = dd(x).sqrt();
            assert!((r * r - dd(x)).to_f64().abs() < 1e-30 * x.max(1.0));
        }
    }

    #[test]
    fn tanh_matches_f64_and_is_odd() {
        for x in [-50.0, -3.0, -0.2, 1e-9, 0.7, 5.0] {
            let t = dd(x).tanh();
            assert!((t.to_f64() - x.tanh()).abs() < 4.0 * f64::EPSILON, "tanh({x})");
            assert_eq!((-dd(x)).tanh(), -t);
        }
    }

    #[test]
    fn gemm_matches_f64() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].map(dd);
        let b = [0.5, -1.0, 2.0, 0.25, 1.0, 3.0].map(dd);
        let mut c = [dd(1.0); 4];
        unsafe { DoubleDouble::gemm_raw(2, 3, 2, dd(2.0), a.as_ptr(), 3, 1, b.as_ptr(), 2, 1, dd(1.0), c.as_mut_ptr(), 2, 1) };
        let want = [2.0 * (0.5 + 4.0 + 3.0) + 1.0, 2.0 * (-1.0 + 0.5 + 9.0) + 1.0, 2.0 * (2.0 + 10.0 + 6.0) + 1.0, 2.0 * (-4.0 + 1.25 + 18.0) + 1.0];
        for (got, w) in c.iter().zip(want) {
            assert_eq!(got.to_f64(), w);
        }
    }
}
