//! Second-order forward-mode differentiation.
//!
//! A [`Jet`] carries a value together with its gradient and Hessian with
//! respect to a fixed set of input variables. Arithmetic propagates all three
//! exactly, so a frame written once over [`Scalar`] yields analytic first and
//! second derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Numeric type a user frame is written against.
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
    fn tanh(&self) -> Self;
}

impl Scalar for f64 {
    fn constant(&self, c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
}

/// Value, gradient and (row-major, symmetric) Hessian in `n` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl Jet {
    pub fn constant_n(n: usize, c: f64) -> Self {
        Jet { v: c, g: vec![0.0; n], h: vec![0.0; n * n] }
    }

    /// The `i`-th coordinate function evaluated at `x`.
    pub fn variable(n: usize, i: usize, x: f64) -> Self {
        let mut j = Jet::constant_n(n, x);
        j.g[i] = 1.0;
        j
    }

    /// Seeds one jet per coordinate of `x`.
    pub fn seed(x: &[f64]) -> Vec<Jet> {
        (0..x.len()).map(|i| Jet::variable(x.len(), i, x[i])).collect()
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    /// Applies a scalar function with derivatives f(v), f'(v), f''(v).
    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Jet {
        let n = self.n();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = f1 * self.h[i * n + j] + f2 * self.g[i] * self.g[j];
            }
        }
        Jet { v: f0, g: self.g.iter().map(|gi| f1 * gi).collect(), h }
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a + b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            v: -self.v,
            g: self.g.iter().map(|a| -a).collect(),
            h: self.h.iter().map(|a| -a).collect(),
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let n = self.n();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                h[k] = self.v * o.h[k]
                    + o.v * self.h[k]
                    + self.g[i] * o.g[j]
                    + self.g[j] * o.g[i];
            }
        }
        Jet {
            v: self.v * o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| self.v * b + o.v * a).collect(),
            h,
        }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        let r = 1.0 / o.v;
        self * o.chain(r, -r * r, 2.0 * r * r * r)
    }
}

impl Scalar for Jet {
    fn constant(&self, c: f64) -> Self {
        Jet::constant_n(self.n(), c)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(&self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    fn sin(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn sqrt(&self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    fn powi(&self, n: i32) -> Self {
        let nf = n as f64;
        let f1 = if n == 0 { 0.0 } else { nf * self.v.powi(n - 1) };
        let f2 = if (0..2).contains(&n) { 0.0 } else { nf * (nf - 1.0) * self.v.powi(n - 2) };
        self.chain(self.v.powi(n), f1, f2)
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        let s = 1.0 - t * t;
        self.chain(t, s, -2.0 * t * s)
    }
}
