//! Second-order forward-mode jets: value, gradient, and Hessian propagated
//! together through arithmetic. Used to differentiate chart expressions of
//! the built-in Morse functions exactly (up to round-off), so no finite
//! differencing enters the critical-point or flow machinery.

use nalgebra::{DMatrix, DVector};

#[allow(unused_imports)]
use crate::real::FloatExt;

#[derive(Debug, Clone)]
pub(crate) struct Jet2 {
    pub v: f64,
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
}

// The algebra is kept complete; the built-in functions and the unit
// tests each reach only part of it.
#[allow(dead_code)]
impl Jet2 {
    pub fn constant(n: usize, v: f64) -> Self {
        Jet2 {
            v,
            g: DVector::zeros(n),
            h: DMatrix::zeros(n, n),
        }
    }

    /// The i-th coordinate function at a point with coordinates `x`.
    pub fn variable(n: usize, i: usize, x: f64) -> Self {
        let mut g = DVector::zeros(n);
        g[i] = 1.0;
        Jet2 {
            v: x,
            g,
            h: DMatrix::zeros(n, n),
        }
    }

    pub fn add(&self, other: &Jet2) -> Jet2 {
        Jet2 {
            v: self.v + other.v,
            g: &self.g + &other.g,
            h: &self.h + &other.h,
        }
    }

    pub fn sub(&self, other: &Jet2) -> Jet2 {
        Jet2 {
            v: self.v - other.v,
            g: &self.g - &other.g,
            h: &self.h - &other.h,
        }
    }

    pub fn mul(&self, other: &Jet2) -> Jet2 {
        let outer = &self.g * other.g.transpose();
        Jet2 {
            v: self.v * other.v,
            g: &self.g * other.v + &other.g * self.v,
            h: &self.h * other.v + &other.h * self.v + &outer + outer.transpose(),
        }
    }

    pub fn div(&self, other: &Jet2) -> Jet2 {
        self.mul(&other.recip())
    }

    pub fn recip(&self) -> Jet2 {
        let iv = 1.0 / self.v;
        let outer = &self.g * self.g.transpose();
        Jet2 {
            v: iv,
            g: &self.g * (-iv * iv),
            h: &self.h * (-iv * iv) + outer * (2.0 * iv * iv * iv),
        }
    }

    pub fn scale(&self, s: f64) -> Jet2 {
        Jet2 {
            v: self.v * s,
            g: &self.g * s,
            h: &self.h * s,
        }
    }

    pub fn add_const(&self, c: f64) -> Jet2 {
        Jet2 {
            v: self.v + c,
            g: self.g.clone(),
            h: self.h.clone(),
        }
    }

    /// Chain rule through a scalar function given its first two derivatives
    /// at `self.v`.
    fn chain(&self, v: f64, d1: f64, d2: f64) -> Jet2 {
        Jet2 {
            v,
            g: &self.g * d1,
            h: &self.h * d1 + &self.g * self.g.transpose() * d2,
        }
    }

    pub fn sq(&self) -> Jet2 {
        self.mul(self)
    }

    pub fn sin(&self) -> Jet2 {
        self.chain(self.v.sin(), self.v.cos(), -self.v.sin())
    }

    pub fn cos(&self) -> Jet2 {
        self.chain(self.v.cos(), -self.v.sin(), -self.v.cos())
    }

    pub fn sqrt(&self) -> Jet2 {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * s * s))
    }
}
