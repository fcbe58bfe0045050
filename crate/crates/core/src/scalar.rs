//! Scalar abstraction shared by the tensor engine, the network and the losses.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type accepted by [`crate::autodiff::Tensor`].
///
/// Implemented for `f32` and `f64`. Training defaults to `f64` so that gradient
/// checks can run at tight tolerances.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or configuration value.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Bit pattern widened to 64 bits, used for hashing and bitwise comparisons.
    fn to_bits64(self) -> u64;
}

impl Scalar for f32 {
    fn to_bits64(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn to_bits64(self) -> u64 {
        self.to_bits()
    }
}
