//! Noise covariance estimation from fit residuals via entry-adaptive
//! thresholding of the sample covariance.

use crate::error::{Result, SofariError};
use crate::model::RegressionData;
use crate::scalar::Scalar;
use crate::Mat;

#[derive(Debug, Clone)]
pub struct ErrorCovEstimate<T: Scalar> {
    pub sigma: Mat<T>,
    pub delta: T,
    /// Fraction of off-diagonal entries surviving the threshold.
    pub kept_fraction: f64,
}

/// `Y - X C` for a coefficient estimate `c`.
pub fn residuals<T: Scalar>(data: &RegressionData<T>, c: &Mat<T>) -> Mat<T> {
    data.y() - data.x() * c
}

/// Adaptive thresholding of the residual sample covariance: off-diagonal
/// entries are zeroed when small relative to an entrywise noise proxy.
///
/// `s_ij` is kept iff `|s_ij| >= delta * sqrt(theta_ij log q / n)` where
/// `theta_ij = n^-1 sum_t (e_ti e_tj - s_ij)^2`. The diagonal is never
/// thresholded and the result is exactly symmetric.
pub fn adaptive_threshold_cov<T: Scalar>(e_hat: &Mat<T>, delta: T) -> Result<ErrorCovEstimate<T>> {
    let (n, q) = (e_hat.nrows(), e_hat.ncols());
    if n < 2 {
        return Err(SofariError::Dimension(
            "covariance estimation needs at least two rows".into(),
        ));
    }
    let n_t = T::of(n as f64);
    let s = e_hat.transpose() * e_hat / n_t;
    let log_q_over_n = T::of((q as f64).ln().max(1.0) / n as f64);
    let mut sigma = s.clone();
    let mut kept = 0usize;
    for i in 0..q {
        for j in (i + 1)..q {
            let sij = s[(i, j)];
            let mut theta = T::zero();
            for t in 0..n {
                let d = e_hat[(t, i)] * e_hat[(t, j)] - sij;
                theta += d * d;
            }
            theta /= n_t;
            let cut = delta * (theta * log_q_over_n).sqrt();
            if sij.abs() < cut {
                sigma[(i, j)] = T::zero();
                sigma[(j, i)] = T::zero();
            } else {
                sigma[(j, i)] = sij;
                kept += 1;
            }
        }
    }
    let off_pairs = q * (q - 1) / 2;
    let kept_fraction = if off_pairs == 0 {
        1.0
    } else {
        kept as f64 / off_pairs as f64
    };
    Ok(ErrorCovEstimate {
        sigma,
        delta,
        kept_fraction,
    })
}

/// AR(1) correlation matrix `rho^|i-j|` scaled by `scale` — the exact
/// noise covariance of the simulated designs. Test and diagnostic use.
pub fn ar1_cov<T: Scalar>(q: usize, rho: T, scale: T) -> Mat<T> {
    Mat::from_fn(q, q, |i, j| {
        scale * rho.powi((i as i32 - j as i32).abs())
    })
}
