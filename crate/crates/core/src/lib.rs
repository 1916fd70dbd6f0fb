//! Debiased inference for latent factors in sparse-SVD multi-response
//! regression.
//!
//! The library estimates a low-rank coefficient matrix `C = sum_k d_k l_k
//! v_k'` layer by layer, then corrects each penalized estimate with a
//! manifold-aware score so that individual entries of `u_k = d_k l_k` and
//! the squared strengths `d_k^2` carry asymptotically valid confidence
//! intervals.
//!
//! Everything numeric is generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); the concrete `f64` aliases at the crate root are what
//! most callers want.

pub mod datagen;
pub mod debias;
pub mod errcov;
pub mod error;
pub mod model;
pub mod nodewise;
pub mod report;
pub mod scalar;
pub mod sofar;
pub mod sphere;

#[doc(hidden)]
pub mod testutil;

pub use error::{Result, SofariError};
pub use scalar::Scalar;

/// Dense matrix over the generic scalar.
pub type Mat<T> = nalgebra::DMatrix<T>;
/// Dense column vector over the generic scalar.
pub type Col<T> = nalgebra::DVector<T>;

/// Default-precision matrix.
pub type MatF = Mat<f64>;
/// Default-precision column vector.
pub type ColF = Col<f64>;
