//! Scalar type selection and the handful of transcendental functions the
//! core needs without `std`.

#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Type code written into serialized tensors.
#[cfg(not(feature = "f32"))]
pub const DTYPE_CODE: u8 = 2;
#[cfg(feature = "f32")]
pub const DTYPE_CODE: u8 = 1;

#[cfg(not(feature = "f32"))]
mod imp {
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    pub fn floor(x: f64) -> f64 {
        libm::floor(x)
    }
    pub fn pow(x: f64, y: f64) -> f64 {
        libm::pow(x, y)
    }
}

#[cfg(feature = "f32")]
mod imp {
    pub fn sqrt(x: f32) -> f32 {
        libm::sqrtf(x)
    }
    pub fn ln(x: f32) -> f32 {
        libm::logf(x)
    }
    pub fn exp(x: f32) -> f32 {
        libm::expf(x)
    }
    pub fn sin(x: f32) -> f32 {
        libm::sinf(x)
    }
    pub fn floor(x: f32) -> f32 {
        libm::floorf(x)
    }
    pub fn pow(x: f32, y: f32) -> f32 {
        libm::powf(x, y)
    }
}

pub use imp::{exp, floor, ln, pow, sin, sqrt};

pub fn from_usize(n: usize) -> Float {
    n as Float
}
