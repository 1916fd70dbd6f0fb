//! Scalar abstraction over the floating-point type used by all numerics.
//!
//! Everything in this crate is generic over [`Scalar`] so the same code runs
//! in `f32` or `f64`; the concrete aliases at the crate root pick `f64`,
//! which is what the CLI and the simulation harness use.

use nalgebra::RealField;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable for all linear algebra and sampling in this
/// crate. Implemented for `f32` and `f64`.
pub trait Scalar: RealField + Copy + Send + Sync + 'static {
    /// Lossy conversion from an `f64` constant.
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64` (exact for both supported types).
    fn to_f64(self) -> f64;

    /// One standard normal draw.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw on `[lo, hi)`.
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }

            #[inline]
            fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Self {
                rng.random_range(lo..hi) as $t
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
