//! Scalar abstraction for the closed-form parts of the toolkit.
//!
//! The uncertainty formulas, regime schedules and the discrete
//! mutual-information oracle are written once over [`Real`] and
//! instantiated for `f64` (the default used by the simulation loop) and
//! `f32`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the generic math modules.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {
    /// Converts an `f64` constant into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Clamps `self` into `[lo, hi]`.
    #[inline]
    fn clip(self, lo: Self, hi: Self) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bounds() {
        assert_eq!(2.5_f64.clip(0.0, 1.0), 1.0);
        assert_eq!((-0.5_f32).clip(0.0, 1.0), 0.0);
        assert_eq!(0.25_f64.clip(0.0, 1.0), 0.25);
    }

    #[test]
    fn literal_round_trip() {
        assert_eq!(<f32 as Real>::lit(0.3), 0.3_f32);
        assert_eq!(<f64 as Real>::lit(0.3), 0.3_f64);
    }
}
