//! Float math that works without `std`. With the `std` feature the inherent
//! `f64` methods are used; without it, `libm` supplies them through this
//! extension trait. Call sites import the trait unconditionally (allowing
//! the unused import under `std`).

/// No-op placeholder under `std`: inherent methods always win.
#[cfg(feature = "std")]
#[allow(dead_code)]
pub(crate) trait FloatExt {}

#[cfg(feature = "std")]
impl FloatExt for f64 {}

// Inherent `core` methods shadow part of the surface on recent
// toolchains; the shim stays complete anyway.
#[cfg(not(feature = "std"))]
#[allow(dead_code)]
pub(crate) trait FloatExt: Sized {
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn cos(self) -> Self;
    fn sin(self) -> Self;
    fn tan(self) -> Self;
    fn acos(self) -> Self;
    fn atan2(self, other: Self) -> Self;
    fn hypot(self, other: Self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, e: Self) -> Self;
    fn rem_euclid(self, rhs: Self) -> Self;
    fn signum(self) -> Self;
    fn floor(self) -> Self;
    fn fract(self) -> Self;
}

#[cfg(not(feature = "std"))]
impl FloatExt for f64 {
    fn sqrt(self) -> f64 {
        libm::sqrt(self)
    }
    fn abs(self) -> f64 {
        libm::fabs(self)
    }
    fn exp(self) -> f64 {
        libm::exp(self)
    }
    fn ln(self) -> f64 {
        libm::log(self)
    }
    fn cos(self) -> f64 {
        libm::cos(self)
    }
    fn sin(self) -> f64 {
        libm::sin(self)
    }
    fn tan(self) -> f64 {
        libm::tan(self)
    }
    fn acos(self) -> f64 {
        libm::acos(self)
    }
    fn atan2(self, other: f64) -> f64 {
        libm::atan2(self, other)
    }
    fn hypot(self, other: f64) -> f64 {
        libm::hypot(self, other)
    }
    fn powi(self, n: i32) -> f64 {
        libm::pow(self, n as f64)
    }
    fn powf(self, e: f64) -> f64 {
        libm::pow(self, e)
    }
    fn rem_euclid(self, rhs: f64) -> f64 {
        let r = self % rhs;
        if r < 0.0 {
            r + libm::fabs(rhs)
        } else {
            r
        }
    }
    fn signum(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            self
        }
    }
    fn floor(self) -> f64 {
        libm::floor(self)
    }
    fn fract(self) -> f64 {
        self - libm::trunc(self)
    }
}
