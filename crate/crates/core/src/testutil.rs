//! Shared helpers for unit and integration tests. Not part of the public
//! API surface.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::RegressionData;
use crate::scalar::Scalar;
use crate::{Col, Mat};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit<T: Scalar>(dim: usize, rng: &mut ChaCha8Rng) -> Col<T> {
    loop {
        let v = Col::from_fn(dim, |_, _| T::std_normal(rng));
        let norm = v.norm();
        if norm.to_f64() > 1e-6 {
            return v / norm;
        }
    }
}

/// Orthonormal `rows x cols` frame from the QR of a Gaussian matrix.
pub fn random_orthonormal<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
    assert!(cols <= rows);
    let g = Mat::from_fn(rows, cols, |_, _| T::std_normal(rng));
    let qr = g.qr();
    let q = qr.q();
    q.columns(0, cols).into()
}

/// Gaussian design and response with no structural relation between them.
pub fn random_data<T: Scalar>(
    n: usize,
    p: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> RegressionData<T> {
    let x = Mat::from_fn(n, p, |_, _| T::std_normal(rng));
    let y = Mat::from_fn(n, q, |_, _| T::std_normal(rng));
    RegressionData::new(x, y).unwrap()
}
