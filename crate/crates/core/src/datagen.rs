//! Seeded generators for the simulation designs used in the coverage
//! studies: block-sparse low-rank truths, weakly-orthogonal or AR(1)
//! designs, and noise calibrated to an exact signal-to-noise ratio.
//!
//! Reproducibility contract: every random quantity flows from a ChaCha
//! stream derived from `(seed, replication)`. Stream indices within a
//! replication are fixed (truth = 0, design = 1, noise = 2), so identical
//! `(seed, rep)` pairs give bit-identical instances regardless of worker
//! scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SofariError};
use crate::model::{compose_coefficient, RegressionData, SvdTriple};
use crate::scalar::Scalar;
use crate::{Col, Mat};

/// Design family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Latent factors made weakly orthogonal by explicit construction.
    WeakOrth,
    /// Rows i.i.d. from an AR(1)-correlated Gaussian; no orthogonality
    /// between latent factors is enforced.
    IidGaussian,
    /// Overlapping, weakly sparse factor supports (fixed 50x30 rank-3
    /// layout) over an AR(1) design.
    WeaklySparse,
}

/// Full description of a simulated scenario.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimSetting {
    pub design: DesignKind,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub d_star: Vec<f64>,
    pub s1: usize,
    pub s2: usize,
    #[serde(default = "default_rho")]
    pub rho_x: f64,
    #[serde(default = "default_rho")]
    pub rho_e: f64,
    #[serde(default = "default_snr")]
    pub snr: f64,
    pub seed: u64,
}

fn default_rho() -> f64 {
    0.3
}
fn default_snr() -> f64 {
    1.0
}

impl SimSetting {
    /// (n, p, q) = (200, 25, 15), weakly-orthogonal design,
    /// d* = (100, 15, 5), three nonzeros per factor.
    pub fn setting_1(seed: u64) -> Self {
        Self {
            design: DesignKind::WeakOrth,
            n: 200,
            p: 25,
            q: 15,
            r: 3,
            d_star: vec![100.0, 15.0, 5.0],
            s1: 3,
            s2: 3,
            rho_x: 0.3,
            rho_e: 0.3,
            snr: 1.0,
            seed,
        }
    }

    /// Same family as setting 1 at (n, p, q) = (200, 50, 30).
    pub fn setting_2(seed: u64) -> Self {
        Self {
            p: 50,
            q: 30,
            ..Self::setting_1(seed)
        }
    }

    /// (200, 25, 15) with i.i.d. AR(1) rows, d* = (200, 15, 5), five
    /// nonzeros per factor — the correlated-factor stress design.
    pub fn setting_3(seed: u64) -> Self {
        Self {
            design: DesignKind::IidGaussian,
            d_star: vec![200.0, 15.0, 5.0],
            s1: 5,
            s2: 5,
            ..Self::setting_1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p == 0 || self.q == 0 || self.r == 0 {
            return Err(SofariError::Config("dimensions must be positive".into()));
        }
        if self.d_star.len() != self.r {
            return Err(SofariError::Config(format!(
                "d_star has {} entries, expected rank {}",
                self.d_star.len(),
                self.r
            )));
        }
        for k in 0..self.r {
            if self.d_star[k] <= 0.0 {
                return Err(SofariError::Config("d_star entries must be positive".into()));
            }
            if k + 1 < self.r && self.d_star[k] <= self.d_star[k + 1] {
                return Err(SofariError::Config(
                    "d_star must be strictly decreasing".into(),
                ));
            }
        }
        match self.design {
            DesignKind::WeaklySparse => {
                if (self.p, self.q, self.r) != (50, 30, 3) {
                    return Err(SofariError::Config(
                        "the weakly-sparse layout is fixed at (p, q, r) = (50, 30, 3)".into(),
                    ));
                }
            }
            _ => {
                if self.r * self.s1 > self.p {
                    return Err(SofariError::SupportOverflow(format!(
                        "left supports need {} slots, p = {}",
                        self.r * self.s1,
                        self.p
                    )));
                }
                if self.r * self.s2 > self.q {
                    return Err(SofariError::SupportOverflow(format!(
                        "right supports need {} slots, q = {}",
                        self.r * self.s2,
                        self.q
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.rho_x) || !(0.0..1.0).contains(&self.rho_e) {
            return Err(SofariError::Config("correlations must lie in [0, 1)".into()));
        }
        if self.snr <= 0.0 {
            return Err(SofariError::Config("snr must be positive".into()));
        }
        Ok(())
    }

    fn rng(&self, rep: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep.wrapping_mul(8).wrapping_add(stream));
        rng
    }
}

/// One generated data set together with everything the coverage harness
/// needs to score it.
pub struct SimInstance<T: Scalar> {
    pub data: RegressionData<T>,
    pub truth: SvdTriple<T>,
    /// True noise covariance `sigma^2 * AR1(rho_e)`.
    pub sigma_e: Mat<T>,
    /// Realized `sigma^2` after SNR calibration.
    pub noise_scale: T,
}

/// Uniform draw from `{-1, 1}`.
fn unif_signs<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    if rng.random::<bool>() {
        T::one()
    } else {
        -T::one()
    }
}

/// Uniform draw from the symmetric two-interval set
/// `[-hi, -lo] U [lo, hi]` (by total length, i.e. sign is a fair coin).
fn unif_two_interval<T: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> T {
    let mag = T::uniform(rng, lo, hi);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn normalized<T: Scalar>(v: Col<T>) -> Col<T> {
    let n = v.norm();
    v / n
}

fn block_vector<T: Scalar>(
    dim: usize,
    offset: usize,
    entries: impl IntoIterator<Item = T>,
) -> Col<T> {
    let mut v = Col::zeros(dim);
    for (i, e) in entries.into_iter().enumerate() {
        v[offset + i] = e;
    }
    v
}

/// True factor triple for the configured design: per-layer unit-norm
/// block-sparse vectors composed with `d_star` and re-projected through a
/// thin SVD so the triple's exact-orthogonality invariants hold.
pub fn gen_truth<T: Scalar>(setting: &SimSetting, rep: u64) -> Result<SvdTriple<T>> {
    setting.validate()?;
    let mut rng = setting.rng(rep, 0);
    let (l_cols, v_cols): (Vec<Col<T>>, Vec<Col<T>>) = match setting.design {
        DesignKind::WeaklySparse => weakly_sparse_factors(&mut rng),
        _ => {
            let mut ls = Vec::with_capacity(setting.r);
            let mut vs = Vec::with_capacity(setting.r);
            for k in 0..setting.r {
                let l = block_vector(
                    setting.p,
                    setting.s1 * k,
                    (0..setting.s1).map(|_| unif_signs::<T>(&mut rng)),
                );
                let v = block_vector(
                    setting.q,
                    setting.s2 * k,
                    (0..setting.s2).map(|_| unif_two_interval::<T>(&mut rng, 0.3, 1.0)),
                );
                ls.push(normalized(l));
                vs.push(normalized(v));
            }
            (ls, vs)
        }
    };
    let mut c = Mat::zeros(setting.p, setting.q);
    for k in 0..setting.r {
        c += &l_cols[k] * v_cols[k].transpose() * T::of(setting.d_star[k]);
    }
    SvdTriple::from_matrix(&c, setting.r)
}

/// The fixed overlapping-support layout: layers share coordinates, with a
/// mix of strong entries and weak (barely nonzero) entries.
fn weakly_sparse_factors<T: Scalar>(rng: &mut ChaCha8Rng) -> (Vec<Col<T>>, Vec<Col<T>>) {
    let p = 50;
    let q = 30;
    let strong_l = |rng: &mut ChaCha8Rng, s: usize| -> Vec<T> {
        (0..s).map(|_| unif_signs(rng)).collect()
    };
    let weak = |rng: &mut ChaCha8Rng, s: usize| -> Vec<T> {
        (0..s).map(|_| unif_two_interval(rng, 0.01, 0.1)).collect()
    };
    let strong_v = |rng: &mut ChaCha8Rng, s: usize| -> Vec<T> {
        (0..s).map(|_| unif_two_interval(rng, 0.6, 1.0)).collect()
    };
    let concat = |blocks: Vec<(usize, Vec<T>)>, dim: usize| -> Col<T> {
        let mut v = Col::zeros(dim);
        for (offset, entries) in blocks {
            for (i, e) in entries.into_iter().enumerate() {
                v[offset + i] = e;
            }
        }
        v
    };
    let l1 = concat(
        vec![(0, strong_l(rng, 8)), (38, weak(rng, 12))],
        p,
    );
    let l2 = concat(vec![(4, weak(rng, 12)), (16, strong_l(rng, 8))], p);
    let l3 = concat(vec![(20, weak(rng, 12)), (32, strong_l(rng, 8))], p);
    let v1 = concat(vec![(0, strong_v(rng, 8)), (27, weak(rng, 3))], q);
    let v2 = concat(vec![(6, weak(rng, 3)), (9, strong_v(rng, 8))], q);
    let v3 = concat(vec![(19, strong_v(rng, 8)), (27, weak(rng, 3))], q);
    (
        vec![normalized(l1), normalized(l2), normalized(l3)],
        vec![normalized(v1), normalized(v2), normalized(v3)],
    )
}

fn ar1<T: Scalar>(dim: usize, rho: T) -> Mat<T> {
    crate::errcov::ar1_cov(dim, rho, T::one())
}

fn chol_lower<T: Scalar>(m: Mat<T>) -> Result<Mat<T>> {
    m.cholesky()
        .map(|c| c.l())
        .ok_or(SofariError::RankDeficiency(f64::INFINITY))
}

fn gaussian_rows<T: Scalar>(n: usize, chol_l: &Mat<T>, rng: &mut ChaCha8Rng) -> Mat<T> {
    let dim = chol_l.nrows();
    let z = Mat::from_fn(n, dim, |_, _| T::std_normal(rng));
    z * chol_l.transpose()
}

/// Orthonormal basis of the complement of the column space of `l`
/// (columns of the SVD of `I - L L'` with unit singular value).
fn orthonormal_complement<T: Scalar>(l: &Mat<T>) -> Mat<T> {
    let p = l.nrows();
    let r = l.ncols();
    let proj = Mat::identity(p, p) - l * l.transpose();
    let svd = proj.svd(true, false);
    let u = svd.u.as_ref().unwrap();
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut out = Mat::zeros(p, p - r);
    for (col, &i) in idx.iter().take(p - r).enumerate() {
        out.set_column(col, &u.column(i));
    }
    out
}

/// Design matrix for the configured family.
pub fn gen_design<T: Scalar>(
    setting: &SimSetting,
    truth: &SvdTriple<T>,
    rep: u64,
) -> Result<Mat<T>> {
    setting.validate()?;
    let mut rng = setting.rng(rep, 1);
    let (n, p, r) = (setting.n, setting.p, setting.r);
    match setting.design {
        DesignKind::IidGaussian | DesignKind::WeaklySparse => {
            let lower = chol_lower(ar1::<T>(p, T::of(setting.rho_x)))?;
            Ok(gaussian_rows(n, &lower, &mut rng))
        }
        DesignKind::WeakOrth => {
            let l_star = truth.l().clone();
            let x1 = Mat::from_fn(n, r, |_, _| T::std_normal(&mut rng));
            if r == p {
                // the factor space is everything; no conditional part
                let p_mat = l_star.clone();
                return solve_against_p(x1, p_mat);
            }
            let l_perp = orthonormal_complement(&l_star);
            let sigma_x = ar1::<T>(p, T::of(setting.rho_x));
            // Gaussian conditioning of the complement coordinates on the
            // factor coordinates of a single AR(1) draw
            let a = l_star.transpose() * &sigma_x * &l_star; // r x r
            let b = l_perp.transpose() * &sigma_x * &l_star; // (p-r) x r
            let d = l_perp.transpose() * &sigma_x * &l_perp; // (p-r) x (p-r)
            let a_lu = a.clone().lu();
            let a_inv_bt = a_lu
                .solve(&b.transpose())
                .ok_or(SofariError::RankDeficiency(f64::INFINITY))?; // r x (p-r)
            let cond_mean_map = a_inv_bt.transpose(); // (p-r) x r, = B A^-1
            let cond_cov = &d - &b * &a_inv_bt;
            // symmetrize before factoring
            let cond_cov = (&cond_cov + cond_cov.transpose()) * T::of(0.5);
            let lower = chol_lower(cond_cov)?;
            let z = gaussian_rows(n, &lower, &mut rng);
            let x2 = &x1 * cond_mean_map.transpose() + z;
            let mut w = Mat::zeros(n, p);
            w.view_mut((0, 0), (n, r)).copy_from(&x1);
            w.view_mut((0, r), (n, p - r)).copy_from(&x2);
            let mut p_mat = Mat::zeros(p, p);
            p_mat.view_mut((0, 0), (p, r)).copy_from(&l_star);
            p_mat.view_mut((0, r), (p, p - r)).copy_from(&l_perp);
            solve_against_p(w, p_mat)
        }
    }
}

/// `X = W P^-1`, rejecting numerically singular `P`.
fn solve_against_p<T: Scalar>(w: Mat<T>, p_mat: Mat<T>) -> Result<Mat<T>> {
    let svd = p_mat.clone().svd(false, false);
    let sv = &svd.singular_values;
    let (mut smax, mut smin) = (0.0f64, f64::INFINITY);
    for v in sv.iter() {
        let v = v.to_f64();
        smax = smax.max(v);
        smin = smin.min(v);
    }
    let cond = smax / smin;
    if !cond.is_finite() || cond > 1e12 {
        return Err(SofariError::RankDeficiency(cond));
    }
    // X' = P^-T W' solved column-block-wise: X P = W  =>  P' X' = W'
    let lu = p_mat.transpose().lu();
    let xt = lu
        .solve(&w.transpose())
        .ok_or(SofariError::RankDeficiency(cond))?;
    Ok(xt.transpose())
}

/// Noise rows with AR(1) cross-response correlation, rescaled so the
/// realized ratio of the weakest layer's signal norm to the noise norm is
/// exactly `snr`. Returns the noise matrix and the realized `sigma^2`.
pub fn gen_noise<T: Scalar>(
    setting: &SimSetting,
    truth: &SvdTriple<T>,
    x: &Mat<T>,
    rep: u64,
) -> Result<(Mat<T>, T)> {
    setting.validate()?;
    let mut rng = setting.rng(rep, 2);
    let lower = chol_lower(ar1::<T>(setting.q, T::of(setting.rho_e)))?;
    let e0 = gaussian_rows(setting.n, &lower, &mut rng);
    let k = setting.r - 1;
    let weakest = x * truth.u(k) * truth.v_col(k).transpose();
    let sigma = weakest.norm() / (T::of(setting.snr) * e0.norm());
    Ok((e0 * sigma, sigma * sigma))
}

/// Full instance assembly: `Y = X C* + E`, seeded per `(seed, rep)`.
pub fn gen_instance<T: Scalar>(setting: &SimSetting, rep: u64) -> Result<SimInstance<T>> {
    let truth = gen_truth::<T>(setting, rep)?;
    let x = gen_design(setting, &truth, rep)?;
    let (e, noise_scale) = gen_noise(setting, &truth, &x, rep)?;
    let c = compose_coefficient(&truth);
    let y = &x * &c + &e;
    let sigma_e = crate::errcov::ar1_cov(setting.q, T::of(setting.rho_e), noise_scale);
    Ok(SimInstance {
        data: RegressionData::new(x, y)?,
        truth,
        sigma_e,
        noise_scale,
    })
}
