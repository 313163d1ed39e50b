use std::borrow::Cow;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type accepted by the differentiable kernels.
///
/// Training and attacks run in `f32`. The same kernels instantiate at `f64`
/// for gradient verification.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f32_slice(values: &[f32]) -> Cow<'_, [Self]>;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Real for f32 {
    fn from_f32_slice(values: &[f32]) -> Cow<'_, [f32]> {
        Cow::Borrowed(values)
    }
}

impl Real for f64 {
    fn from_f32_slice(values: &[f32]) -> Cow<'_, [f64]> {
        Cow::Owned(values.iter().map(|&v| v as f64).collect())
    }
}

/// Elementwise sign with `sign(0) = 0`.
///
/// `f32::signum` maps `+0.0` to `1.0`, which would push perturbations along
/// coordinates that carry no gradient at all.
pub fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
