//! Regression data, the sparse-SVD parametrization, the constrained
//! least-squares loss, and its analytic gradients.
//!
//! The loss is simplified with the right-singular-vector orthogonality
//! applied *before* differentiation (keeping the `v_k' v_k` factor for the
//! radial term); the gradients below are the derivatives of that simplified
//! form. Alternate simplification orders are deliberately not exposed.

use std::sync::OnceLock;

use crate::error::{Result, SofariError};
use crate::scalar::Scalar;
use crate::{Col, Mat};

/// Design/response pair with cached Gram quantities.
///
/// `gram()` and `xty()` are materialized on first use and then shared;
/// construction-then-read is the only mutation pattern, so values can be
/// shared freely across replication workers.
pub struct RegressionData<T: Scalar> {
    x: Mat<T>,
    y: Mat<T>,
    gram: OnceLock<Mat<T>>,
    xty: OnceLock<Mat<T>>,
}

impl<T: Scalar> RegressionData<T> {
    pub fn new(x: Mat<T>, y: Mat<T>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
            return Err(SofariError::Dimension("empty design or response".into()));
        }
        if x.nrows() != y.nrows() {
            return Err(SofariError::Dimension(format!(
                "X has {} rows but Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        Ok(Self {
            x,
            y,
            gram: OnceLock::new(),
            xty: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn x(&self) -> &Mat<T> {
        &self.x
    }

    pub fn y(&self) -> &Mat<T> {
        &self.y
    }

    /// `n^-1 X' X`, computed once and cached.
    pub fn gram(&self) -> &Mat<T> {
        self.gram.get_or_init(|| {
            let inv_n = T::one() / T::of(self.n() as f64);
            let mut g = self.x.transpose() * &self.x * inv_n;
            // symmetrize away rounding
            let gt = g.transpose();
            g += &gt;
            g *= T::of(0.5);
            g
        })
    }

    /// `n^-1 X' Y`, computed once and cached.
    pub fn xty(&self) -> &Mat<T> {
        self.xty.get_or_init(|| {
            let inv_n = T::one() / T::of(self.n() as f64);
            self.x.transpose() * &self.y * inv_n
        })
    }
}

/// Exact SVD factorization `sum_k d_k l_k v_k'` with orthonormal factors and
/// strictly decreasing positive singular values.
#[derive(Debug, Clone)]
pub struct SvdTriple<T: Scalar> {
    l: Mat<T>,
    d: Col<T>,
    v: Mat<T>,
    r: usize,
}

pub const ORTHO_TOL: f64 = 1e-10;
pub const DEFAULT_GAP_TOL: f64 = 1e-12;

impl<T: Scalar> SvdTriple<T> {
    /// Validates the orthonormality and ordering invariants and applies the
    /// sign canonicalization (largest-magnitude entry of each `v_k`
    /// positive).
    pub fn new(l: Mat<T>, d: Col<T>, v: Mat<T>) -> Result<Self> {
        Self::with_gap_tol(l, d, v, DEFAULT_GAP_TOL)
    }

    pub fn with_gap_tol(mut l: Mat<T>, d: Col<T>, mut v: Mat<T>, gap_tol: f64) -> Result<Self> {
        let r = d.len();
        if r == 0 || l.ncols() != r || v.ncols() != r {
            return Err(SofariError::Dimension(
                "factor count mismatch between L, d, V".into(),
            ));
        }
        for k in 0..r {
            if d[k] <= T::zero() {
                return Err(SofariError::ConstraintViolation(format!(
                    "singular value {} not positive",
                    k + 1
                )));
            }
            if k + 1 < r && (d[k] - d[k + 1]).to_f64() <= gap_tol {
                return Err(SofariError::ConstraintViolation(format!(
                    "singular values not strictly decreasing at position {}",
                    k + 1
                )));
            }
        }
        check_orthonormal(&l, ORTHO_TOL, "L")?;
        check_orthonormal(&v, ORTHO_TOL, "V")?;
        canonicalize_signs(&mut l, &mut v);
        Ok(Self { l, d, v, r })
    }

    /// Thin SVD of `c`, truncated to rank `r`, canonicalized.
    pub fn from_matrix(c: &Mat<T>, r: usize) -> Result<Self> {
        let max = c.nrows().min(c.ncols());
        if r == 0 || r > max {
            return Err(SofariError::RankTooLarge { requested: r, max });
        }
        let svd = c.clone().svd(true, true);
        let u = svd.u.as_ref().expect("svd requested u");
        let vt = svd.v_t.as_ref().expect("svd requested v_t");
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap()
        });
        let mut l = Mat::zeros(c.nrows(), r);
        let mut v = Mat::zeros(c.ncols(), r);
        let mut d = Col::zeros(r);
        for (col, &i) in idx.iter().take(r).enumerate() {
            l.set_column(col, &u.column(i));
            v.set_column(col, &vt.row(i).transpose());
            d[col] = svd.singular_values[i];
        }
        Self::new(l, d, v)
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn l(&self) -> &Mat<T> {
        &self.l
    }

    pub fn d(&self) -> &Col<T> {
        &self.d
    }

    pub fn v(&self) -> &Mat<T> {
        &self.v
    }

    /// `u_k = d_k l_k` (0-based `k`).
    pub fn u(&self, k: usize) -> Col<T> {
        let mut u: Col<T> = self.l.column(k).into();
        u *= self.d[k];
        u
    }

    /// `v_k` as an owned column (0-based `k`).
    pub fn v_col(&self, k: usize) -> Col<T> {
        self.v.column(k).into()
    }

    /// `U = L diag(d)`, columns `u_1, ..., u_r`.
    pub fn u_mat(&self) -> Mat<T> {
        let mut u = self.l.clone();
        for k in 0..self.r {
            let mut col = u.column_mut(k);
            col *= self.d[k];
        }
        u
    }

    /// All `u_k` as owned columns.
    pub fn u_cols(&self) -> Vec<Col<T>> {
        (0..self.r).map(|k| self.u(k)).collect()
    }

    pub fn v_cols(&self) -> Vec<Col<T>> {
        (0..self.r).map(|k| self.v_col(k)).collect()
    }
}

fn check_orthonormal<T: Scalar>(m: &Mat<T>, tol: f64, name: &str) -> Result<()> {
    let g = m.transpose() * m;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            let dev = (g[(i, j)].to_f64() - target).abs();
            if dev > tol {
                return Err(SofariError::ConstraintViolation(format!(
                    "{name}'{name} deviates from identity by {dev:.3e} at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Flips paired columns so the largest-magnitude entry of each `v_k` is
/// positive, removing the SVD sign ambiguity.
pub(crate) fn canonicalize_signs<T: Scalar>(l: &mut Mat<T>, v: &mut Mat<T>) {
    for k in 0..v.ncols() {
        let col = v.column(k);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            let mut vc = v.column_mut(k);
            vc.neg_mut();
            let mut lc = l.column_mut(k);
            lc.neg_mut();
        }
    }
}

/// `sum_k d_k l_k v_k'`.
pub fn compose_coefficient<T: Scalar>(t: &SvdTriple<T>) -> Mat<T> {
    &t.u_mat() * t.v().transpose()
}

fn check_v_orthonormal<T: Scalar>(v_set: &[Col<T>]) -> Result<()> {
    const TOL: f64 = 1e-8;
    for i in 0..v_set.len() {
        for j in i..v_set.len() {
            let dot = v_set[i].dot(&v_set[j]).to_f64();
            let target = if i == j { 1.0 } else { 0.0 };
            if (dot - target).abs() > TOL {
                return Err(SofariError::ConstraintViolation(format!(
                    "v_{} ' v_{} = {dot:.3e}, expected {target}",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    Ok(())
}

/// Constrained least-squares loss `(2n)^-1 ||Y - sum_i X u_i v_i'||_F^2`.
pub fn loss<T: Scalar>(
    data: &RegressionData<T>,
    u_set: &[Col<T>],
    v_set: &[Col<T>],
) -> Result<T> {
    if u_set.len() != v_set.len() {
        return Err(SofariError::Dimension("u/v factor count mismatch".into()));
    }
    check_v_orthonormal(v_set)?;
    let mut resid = data.y().clone();
    for (u, v) in u_set.iter().zip(v_set) {
        let xu = data.x() * u;
        // resid -= (X u) v'
        for j in 0..resid.ncols() {
            let vj = v[j];
            let mut col = resid.column_mut(j);
            col.axpy(-vj, &xu, T::one());
        }
    }
    let half_inv_n = T::of(0.5) / T::of(data.n() as f64);
    Ok(resid.norm_squared() * half_inv_n)
}

/// `dL/du_k = Sigma u_k - n^-1 X'Y v_k`.
pub fn grad_u<T: Scalar>(
    data: &RegressionData<T>,
    u_set: &[Col<T>],
    v_set: &[Col<T>],
    k: usize,
) -> Result<Col<T>> {
    check_v_orthonormal(v_set)?;
    Ok(data.gram() * &u_set[k] - data.xty() * &v_set[k])
}

/// `dL/dv_k = v_k (u_k' Sigma u_k) - n^-1 Y'X u_k`.
pub fn grad_v<T: Scalar>(
    data: &RegressionData<T>,
    u_set: &[Col<T>],
    v_set: &[Col<T>],
    k: usize,
) -> Result<Col<T>> {
    check_v_orthonormal(v_set)?;
    let zkk = (data.gram() * &u_set[k]).dot(&u_set[k]);
    Ok(&v_set[k] * zkk - data.xty().transpose() * &u_set[k])
}

/// Peeled `dL/du_k` after subtracting the surrogate `c1` of the leading
/// layers from the response: adds `Sigma C1 v_k`.
pub fn grad_u_peeled<T: Scalar>(
    data: &RegressionData<T>,
    c1: &Mat<T>,
    u_set: &[Col<T>],
    v_set: &[Col<T>],
    k: usize,
) -> Result<Col<T>> {
    let base = grad_u(data, u_set, v_set, k)?;
    Ok(base + data.gram() * (c1 * &v_set[k]))
}

/// Peeled `dL/dv_k`: adds `C1' Sigma u_k`.
pub fn grad_v_peeled<T: Scalar>(
    data: &RegressionData<T>,
    c1: &Mat<T>,
    u_set: &[Col<T>],
    v_set: &[Col<T>],
    k: usize,
) -> Result<Col<T>> {
    let base = grad_v(data, u_set, v_set, k)?;
    Ok(base + c1.transpose() * (data.gram() * &u_set[k]))
}

/// Which parameters a layer's debiasing treats as nuisance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceVariant {
    /// All other layers enter the score (SOFARI_s).
    Strong,
    /// The leading `k - 1` layers are frozen and peeled off (SOFARI).
    Weak,
}

/// View of the nuisance parameters for layer `k` (1-based).
pub struct NuisanceView<T: Scalar> {
    pub layer: usize,
    pub variant: NuisanceVariant,
    /// `u_i` entering the nuisance vector (excluding `u_k`).
    pub u_others: Vec<Col<T>>,
    /// `v_i` entering the nuisance vector (including `v_k`).
    pub v_all: Vec<Col<T>>,
    /// Frozen surrogate of the leading `k - 1` layers; zero for Strong and
    /// for `k = 1`.
    pub c1: Mat<T>,
}

impl<T: Scalar> NuisanceView<T> {
    pub fn new(triple: &SvdTriple<T>, layer: usize, variant: NuisanceVariant) -> Result<Self> {
        let r = triple.rank();
        if layer == 0 || layer > r {
            return Err(SofariError::Config(format!(
                "layer {layer} out of range 1..={r}"
            )));
        }
        let k = layer - 1;
        let (u_others, v_all, c1) = match variant {
            NuisanceVariant::Strong => {
                let u_others = (0..r).filter(|&i| i != k).map(|i| triple.u(i)).collect();
                let v_all = triple.v_cols();
                (u_others, v_all, Mat::zeros(triple.l().nrows(), triple.v().nrows()))
            }
            NuisanceVariant::Weak => {
                let u_others = (k + 1..r).map(|i| triple.u(i)).collect();
                let v_all = (k..r).map(|i| triple.v_col(i)).collect();
                let mut c1 = Mat::zeros(triple.l().nrows(), triple.v().nrows());
                for i in 0..k {
                    let u = triple.u(i);
                    let v = triple.v_col(i);
                    c1 += u * v.transpose();
                }
                (u_others, v_all, c1)
            }
        };
        Ok(Self {
            layer,
            variant,
            u_others,
            v_all,
            c1,
        })
    }
}
