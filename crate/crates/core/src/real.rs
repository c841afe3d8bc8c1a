use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the tensor engine.
///
/// Training runs in `f32`; gradient verification runs in `f64`.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64_lossy(x)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `ln(1 + e^x)` without overflow.
    fn softplus(self) -> Self {
        let zero = Self::zero();
        self.max(zero) + (-self.abs()).exp().ln_1p()
    }

    /// `tanh` through `expm1`, several times faster than the libm `tanhf`
    /// and exact to rounding near zero.
    fn fast_tanh(self) -> Self {
        let m = (Self::lit(-2.0) * self.abs()).exp_m1();
        (-m / (Self::lit(2.0) + m)).copysign(self)
    }

    /// Branch-free so that mixed-sign inputs do not stall the pipeline.
    fn sigmoid(self) -> Self {
        let e = (-self.abs()).exp();
        let s = Self::one() / (Self::one() + e);
        if self >= Self::zero() {
            s
        } else {
            e * s
        }
    }
}

impl Real for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
}
