//! Elementwise operators, activations, and whole-tensor reductions.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numerically stable sigmoid.
pub(crate) fn sigmoid_val<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// softplus(x) = ln(1 + e^x), stable for large |x|.
pub(crate) fn softplus_val<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// tanh(softplus(x)) through a single exp: with t = e^x and u = (1+t)²,
/// tanh(ln(1+t)) = (u−1)/(u+1). For large x the value saturates at 1.
#[inline]
fn tanh_softplus<S: Scalar>(x: S) -> S {
    if x > S::from_f64(20.0) {
        S::one()
    } else {
        let u = (S::one() + x.exp()).powi(2);
        (u - S::one()) / (u + S::one())
    }
}

fn mish_val<S: Scalar>(x: S) -> S {
    x * tanh_softplus(x)
}

impl<S: Scalar> Tensor<S> {
    /// Apply `f` elementwise; `df(x)` is the local derivative at the input.
    pub(crate) fn unary_op(
        &self,
        f: impl Fn(S) -> S,
        df: impl Fn(S) -> S + 'static,
    ) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g, parents| {
                let x = parents[0].data();
                let contrib: Vec<S> = g.iter().zip(x.iter()).map(|(&gi, &xi)| gi * df(xi)).collect();
                drop(x);
                parents[0].add_grad(&contrib);
            },
        )
    }

    /// Elementwise combine with `rhs` (shapes must match exactly).
    pub(crate) fn binary_op(
        &self,
        rhs: &Tensor<S>,
        op_name: &'static str,
        f: impl Fn(S, S) -> S,
        dfa: impl Fn(S, S) -> S + 'static,
        dfb: impl Fn(S, S) -> S + 'static,
    ) -> Result<Tensor<S>> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(format!(
                "{op_name}: shape {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let out: Vec<S> = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            move |g, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                let ga: Vec<S> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&gi, (&ai, &bi))| gi * dfa(ai, bi))
                    .collect();
                let gb: Vec<S> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&gi, (&ai, &bi))| gi * dfb(ai, bi))
                    .collect();
                drop(a);
                drop(b);
                parents[0].add_grad(&ga);
                parents[1].add_grad(&gb);
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_op(rhs, "add", |a, b| a + b, |_, _| S::one(), |_, _| S::one())
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_op(rhs, "sub", |a, b| a - b, |_, _| S::one(), |_, _| -S::one())
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_op(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_op(
            rhs,
            "div",
            |a, b| a / b,
            |_, b| S::one() / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        self.unary_op(|x| x + c, |_| S::one())
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        self.unary_op(move |x| x * c, move |_| c)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.mul_scalar(-S::one())
    }

    pub fn square(&self) -> Tensor<S> {
        self.unary_op(|x| x * x, |x| S::from_f64(2.0) * x)
    }

    pub fn sqrt(&self) -> Tensor<S> {
        self.unary_op(
            |x| x.sqrt(),
            |x| S::from_f64(0.5) / x.sqrt().max(S::from_f64(1e-12)),
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary_op(|x| x.exp(), |x| x.exp())
    }

    pub fn recip(&self) -> Tensor<S> {
        self.unary_op(|x| S::one() / x, |x| -S::one() / (x * x))
    }

    pub fn ln(&self) -> Tensor<S> {
        self.unary_op(|x| x.ln(), |x| S::one() / x)
    }

    pub fn abs(&self) -> Tensor<S> {
        self.unary_op(
            |x| x.abs(),
            |x| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary_op(
            |x| x.tanh(),
            |x| {
                let t = x.tanh();
                S::one() - t * t
            },
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        self.unary_op(
            |x| x.max(S::zero()),
            |x| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    /// Default slope 0.01.
    pub fn leaky_relu(&self, slope: S) -> Tensor<S> {
        self.unary_op(
            move |x| if x >= S::zero() { x } else { x * slope },
            move |x| if x >= S::zero() { S::one() } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary_op(sigmoid_val, |x| {
            let s = sigmoid_val(x);
            s * (S::one() - s)
        })
    }

    pub fn softplus(&self) -> Tensor<S> {
        self.unary_op(softplus_val, sigmoid_val)
    }

    /// mish(x) = x * tanh(softplus(x)).
    pub fn mish(&self) -> Tensor<S> {
        self.unary_op(mish_val, |x| {
            if x > S::from_f64(20.0) {
                return S::one();
            }
            let e = x.exp();
            let u = (S::one() + e).powi(2);
            let t = (u - S::one()) / (u + S::one());
            // sigmoid(x) = e/(1+e), safe here since x ≤ 20
            t + x * (S::one() - t * t) * e / (S::one() + e)
        })
    }

    /// Gradient is 1 strictly inside (lo, hi), 0 outside.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        self.unary_op(
            move |x| x.max(lo).min(hi),
            move |x| {
                if x > lo && x < hi {
                    S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<S> {
        let total = self.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g, parents| {
            parents[0].add_grad(&vec![g[0]; n]);
        })
    }

    /// Mean of all elements as a scalar tensor.
    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel();
        assert!(n > 0, "mean of empty tensor");
        self.sum().mul_scalar(S::one() / S::from_usize(n))
    }
}
