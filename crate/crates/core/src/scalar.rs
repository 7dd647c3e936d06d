//! Scalar abstraction shared by every numeric module.
//!
//! The math is written once against [`Real`]; `f64` is the working precision of
//! the CLI and of serialized certificates, `f32` is supported for the pure
//! formulas and the linear-algebra paths.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the library: `f32` or `f64`.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy + Send + Sync {
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    /// Lossy conversion to `f64` for reporting and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Converts a count into the scalar type.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn machine_epsilon() -> Self {
        Self::default_epsilon()
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip() {
        assert_eq!(<f64 as Real>::lit(0.75), 0.75);
        assert_eq!(<f32 as Real>::lit(0.5), 0.5f32);
        assert!((<f32 as Real>::lit(0.1).as_f64() - 0.1).abs() < 1e-7);
        assert!(!<f64 as Real>::lit(f64::INFINITY).is_finite_value());
    }
}
