//! Floating-point abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the network, entropy and resampling code is generic over.
///
/// Implemented for `f32` and `f64`. Hyperparameters are carried as `f64`
/// in configuration types and converted with [`Scalar::lit`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    /// Widens to `f64`.
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Tolerance used when checking that a probability pair sums to one.
    ///
    /// `1e-12` for `f64`; a few ulps for narrower types.
    fn sum_tolerance() -> Self {
        Self::lit(1e-12).max(Self::epsilon() * Self::lit(16.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
