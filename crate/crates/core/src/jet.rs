//! Scalars that coefficient formulas are written against.
//!
//! A formula is written once, generically over [`Scalar`]; evaluating it with
//! `f64` gives values, evaluating it with [`Jet`] gives value, gradient and
//! Hessian in the four arguments (x, y, z, u) by forward-mode differentiation.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// Variable slots of a jet.
pub const X: usize = 0;
pub const Y: usize = 1;
pub const Z: usize = 2;
pub const U: usize = 3;

#[inline]
const fn hidx(i: usize, j: usize) -> usize {
    // packed upper triangle of a 4x4 symmetric matrix
    let (a, b) = if i <= j { (i, j) } else { (j, i) };
    a * 4 - a * (a + 1) / 2 + b
}

/// Second-order jet in four variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 4],
    pub h: [f64; 10],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { v, g: [0.0; 4], h: [0.0; 10] }
    }

    pub fn var(v: f64, slot: usize) -> Self {
        let mut g = [0.0; 4];
        g[slot] = 1.0;
        Jet { v, g, h: [0.0; 10] }
    }

    pub fn d(&self, i: usize) -> f64 {
        self.g[i]
    }

    pub fn dd(&self, i: usize, j: usize) -> f64 {
        self.h[hidx(i, j)]
    }

    /// Quadratic form vᵀ D² v over the (x, y, z) block.
    pub fn quad_xyz(&self, v: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += v[i] * v[j] * self.dd(i, j);
            }
        }
        s
    }

    /// Bilinear form vᵀ D² w over the (x, y, z) block.
    pub fn bilin_xyz(&self, v: [f64; 3], w: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += v[i] * w[j] * self.dd(i, j);
            }
        }
        s
    }

    #[inline]
    fn chain(self, f: f64, f1: f64, f2: f64) -> Self {
        let mut out = Jet { v: f, g: [0.0; 4], h: [0.0; 10] };
        for i in 0..4 {
            out.g[i] = f1 * self.g[i];
        }
        for i in 0..4 {
            for j in i..4 {
                let k = hidx(i, j);
                out.h[k] = f1 * self.h[k] + f2 * self.g[i] * self.g[j];
            }
        }
        out
    }

    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, o: Jet) -> Jet {
        self.v += o.v;
        for i in 0..4 {
            self.g[i] += o.g[i];
        }
        for k in 0..10 {
            self.h[k] += o.h[k];
        }
        self
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
    fn neg(mut self) -> Jet {
        self.v = -self.v;
        for x in self.g.iter_mut() {
            *x = -*x;
        }
        for x in self.h.iter_mut() {
            *x = -*x;
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let mut out = Jet { v: self.v * o.v, g: [0.0; 4], h: [0.0; 10] };
        for i in 0..4 {
            out.g[i] = self.v * o.g[i] + o.v * self.g[i];
        }
        for i in 0..4 {
            for j in i..4 {
                let k = hidx(i, j);
                out.h[k] = self.v * o.h[k] + o.v * self.h[k] + self.g[i] * o.g[j] + self.g[j] * o.g[i];
            }
        }
        out
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}

impl Scalar for Jet {
    fn cst(v: f64) -> Self {
        Jet::constant(v)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let d = 1.0 - t * t;
        self.chain(t, d, -2.0 * t * d)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * s * s))
    }
    fn powi(self, n: i32) -> Self {
        match n {
            0 => Jet::constant(1.0),
            1 => self,
            2 => self * self,
            _ => {
                let nf = n as f64;
                let f = self.v.powi(n);
                let f1 = nf * self.v.powi(n - 1);
                let f2 = nf * (nf - 1.0) * self.v.powi(n - 2);
                self.chain(f, f1, f2)
            }
        }
    }
    fn scale(self, c: f64) -> Self {
        let mut out = self;
        out.v *= c;
        for x in out.g.iter_mut() {
            *x *= c;
        }
        for x in out.h.iter_mut() {
            *x *= c;
        }
        out
    }
}
