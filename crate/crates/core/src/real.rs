//! Scalar type used for every tensor element.
//!
//! 64-bit by default; the `f32` feature switches the whole engine to 32-bit.
//! All transcendental functions go through `libm` so results do not depend on
//! the host C library.

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Size in bytes of one stored element, used for message accounting.
pub const BYTES_PER_ELEM: usize = core::mem::size_of::<Real>();

#[cfg(not(feature = "f32"))]
mod imp {
    use super::Real;
    #[inline]
    pub fn exp(x: Real) -> Real {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: Real) -> Real {
        libm::log(x)
    }
    #[inline]
    pub fn sqrt(x: Real) -> Real {
        libm::sqrt(x)
    }
    #[inline]
    pub fn erf(x: Real) -> Real {
        libm::erf(x)
    }
    #[inline]
    pub fn sin(x: Real) -> Real {
        libm::sin(x)
    }
    #[inline]
    pub fn cos(x: Real) -> Real {
        libm::cos(x)
    }
}

#[cfg(feature = "f32")]
mod imp {
    use super::Real;
    #[inline]
    pub fn exp(x: Real) -> Real {
        libm::expf(x)
    }
    #[inline]
    pub fn ln(x: Real) -> Real {
        libm::logf(x)
    }
    #[inline]
    pub fn sqrt(x: Real) -> Real {
        libm::sqrtf(x)
    }
    #[inline]
    pub fn erf(x: Real) -> Real {
        libm::erff(x)
    }
    #[inline]
    pub fn sin(x: Real) -> Real {
        libm::sinf(x)
    }
    #[inline]
    pub fn cos(x: Real) -> Real {
        libm::cosf(x)
    }
}

pub use imp::{cos, erf, exp, ln, sin, sqrt};

pub const PI: Real = core::f64::consts::PI as Real;
