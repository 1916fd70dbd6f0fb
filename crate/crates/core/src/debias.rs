//! The debiasing engine: builds the nuisance-correction matrix `M_k` and
//! the approximate-inverse weight `W_k`, evaluates the corrected score, and
//! turns an initial sparse-SVD fit into debiased layer estimates with
//! plug-in variances.
//!
//! Two constructions are implemented. The *strong* variant corrects layer
//! `k` against every other layer simultaneously and is valid when the
//! latent factors are nearly uncorrelated under the design. The *weak*
//! variant freezes the leading `k - 1` layers, subtracts their surrogate
//! from the response, and corrects only against the trailing layers; it
//! tolerates stronger factor correlation. Both reduce to the same
//! expressions at `k = 1`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::errcov::{adaptive_threshold_cov, residuals, ErrorCovEstimate};
use crate::error::{Result, SofariError};
pub use crate::model::NuisanceVariant;
use crate::model::{RegressionData, SvdTriple};
use crate::nodewise::{nodewise_precision, ApproxInverse, NodewiseConfig};
use crate::scalar::Scalar;
use crate::sofar::{fit_sofar, SofarConfig, SofarEstimate};
use crate::{Col, Mat};

/// Everything layer `k`'s debiasing needs, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct LayerContext<T: Scalar> {
    /// 1-based layer index.
    pub k: usize,
    pub variant: NuisanceVariant,
    /// `u_k' Gram u_k` of the initial estimate under the debiasing data.
    pub z_kk: T,
    /// Nuisance-correction matrix (p x q).
    pub m_k: Mat<T>,
    /// Debiasing weight matrix (p x p).
    pub w_k: Mat<T>,
    /// Sum of the other layers' `u v'` entering `m_k` (all others for
    /// Strong, trailing only for Weak).
    pub c_other: Mat<T>,
    /// Their `u` columns, in layer order.
    pub u_other: Mat<T>,
    /// Frozen surrogate of the leading layers (zero for Strong).
    pub c1: Mat<T>,
}

/// Debiased estimate and plug-in variances for one layer.
#[derive(Debug, Clone)]
pub struct DebiasedLayer<T: Scalar> {
    pub k: usize,
    pub u_hat: Col<T>,
    pub d2_hat: T,
    /// Per-coordinate variances for unit-vector contrasts.
    pub var_u: Col<T>,
    pub var_d2: T,
    /// Corrected score at the initial estimate.
    pub score: Col<T>,
    /// True when the variances needed the unthresholded covariance
    /// fallback.
    pub var_fallback: bool,
    pub context: LayerContext<T>,
}

fn other_indices(r: usize, k: usize, variant: NuisanceVariant) -> Vec<usize> {
    match variant {
        NuisanceVariant::Strong => (0..r).filter(|&i| i + 1 != k).collect(),
        NuisanceVariant::Weak => (k..r).collect(),
    }
}

/// `M_k = -z_kk^-1 Gram C_other`, the linear response of the score to the
/// nuisance layers.
pub fn build_m<T: Scalar>(
    triple: &SvdTriple<T>,
    gram: &Mat<T>,
    k: usize,
    variant: NuisanceVariant,
) -> Result<Mat<T>> {
    let (z_kk, c_other, _) = nuisance_parts(triple, gram, k, variant)?;
    Ok(gram * c_other * (-T::one() / z_kk))
}

fn nuisance_parts<T: Scalar>(
    triple: &SvdTriple<T>,
    gram: &Mat<T>,
    k: usize,
    variant: NuisanceVariant,
) -> Result<(T, Mat<T>, Mat<T>)> {
    let r = triple.rank();
    if k == 0 || k > r {
        return Err(SofariError::Config(format!("layer {k} out of range 1..={r}")));
    }
    let u_k = triple.u(k - 1);
    let z_kk = (gram * &u_k).dot(&u_k);
    if z_kk.to_f64() <= 1e-12 {
        return Err(SofariError::DegenerateLayer {
            k,
            z: z_kk.to_f64(),
        });
    }
    let others = other_indices(r, k, variant);
    let p = triple.l().nrows();
    let q = triple.v().nrows();
    let mut c_other = Mat::zeros(p, q);
    let mut u_other = Mat::zeros(p, others.len());
    for (col, &i) in others.iter().enumerate() {
        let u = triple.u(i);
        c_other += &u * triple.v_col(i).transpose();
        u_other.set_column(col, &u);
    }
    Ok((z_kk, c_other, u_other))
}

/// `W_k = Theta (I + z^-1 Gram U (I - z^-1 U' Gram U)^-1 U')` with `U` the
/// nuisance `u`-columns; collapses to `Theta` when there are none.
pub fn build_w<T: Scalar>(
    triple: &SvdTriple<T>,
    gram: &Mat<T>,
    theta: &Mat<T>,
    k: usize,
    variant: NuisanceVariant,
) -> Result<Mat<T>> {
    let (z_kk, _, u_other) = nuisance_parts(triple, gram, k, variant)?;
    let t = u_other.ncols();
    if t == 0 {
        return Ok(theta.clone());
    }
    let p = gram.nrows();
    let inv_z = T::one() / z_kk;
    let su = gram * &u_other; // p x t
    let inner = Mat::identity(t, t) - u_other.transpose() * &su * inv_z;
    // condition check on the tiny system
    let sv = inner.clone().svd(false, false).singular_values;
    let (mut smax, mut smin) = (0.0f64, f64::INFINITY);
    for v in sv.iter() {
        smax = smax.max(v.to_f64());
        smin = smin.min(v.to_f64());
    }
    let cond = smax / smin;
    if !cond.is_finite() || cond > 1e10 {
        return Err(SofariError::SingularInnerMatrix { k, cond });
    }
    let solved = inner
        .lu()
        .solve(&u_other.transpose())
        .ok_or(SofariError::SingularInnerMatrix { k, cond })?; // t x p
    Ok(theta * (Mat::identity(p, p) + su * solved * inv_z))
}

/// Corrected score `psi_k = dL/du_k - M_k dL/dv_k` at the initial
/// estimate, with the weak variant's peeled response terms.
pub fn score<T: Scalar>(
    triple: &SvdTriple<T>,
    data: &RegressionData<T>,
    m_k: &Mat<T>,
    c1: &Mat<T>,
    k: usize,
) -> Col<T> {
    let u = triple.u(k - 1);
    let v = triple.v_col(k - 1);
    let gram = data.gram();
    let xty = data.xty();
    let gu_base = gram * &u;
    let z = gu_base.dot(&u);
    let mut gu = &gu_base - xty * &v;
    let mut gv = &v * z - xty.transpose() * &u;
    if c1.amax() > T::zero() {
        gu += gram * (c1 * &v);
        gv += c1.transpose() * &gu_base;
    }
    gu - m_k * gv
}

fn c1_for<T: Scalar>(triple: &SvdTriple<T>, k: usize, variant: NuisanceVariant) -> Mat<T> {
    let p = triple.l().nrows();
    let q = triple.v().nrows();
    let mut c1 = Mat::zeros(p, q);
    if variant == NuisanceVariant::Weak {
        for i in 0..k - 1 {
            c1 += triple.u(i) * triple.v_col(i).transpose();
        }
    }
    c1
}

/// Assembles the full layer context against the debiasing data.
pub fn build_context<T: Scalar>(
    triple: &SvdTriple<T>,
    data: &RegressionData<T>,
    theta: &Mat<T>,
    k: usize,
    variant: NuisanceVariant,
) -> Result<LayerContext<T>> {
    let gram = data.gram();
    let (z_kk, c_other, u_other) = nuisance_parts(triple, gram, k, variant)?;
    let m_k = gram * &c_other * (-T::one() / z_kk);
    let w_k = build_w(triple, gram, theta, k, variant)?;
    Ok(LayerContext {
        k,
        variant,
        z_kk,
        m_k,
        w_k,
        c_other,
        u_other,
        c1: c1_for(triple, k, variant),
    })
}

/// Inner matrix of the sandwich variance: `z M Se M' + (v'Se v) Gram
/// - 2 Gram u v' Se M'`.
fn variance_inner<T: Scalar>(
    ctx: &LayerContext<T>,
    triple: &SvdTriple<T>,
    gram: &Mat<T>,
    sigma_e: &Mat<T>,
) -> Mat<T> {
    let u = triple.u(ctx.k - 1);
    let v = triple.v_col(ctx.k - 1);
    let se_mt = sigma_e * ctx.m_k.transpose(); // q x p
    let term1 = &ctx.m_k * &se_mt * ctx.z_kk;
    let vsv = (sigma_e * &v).dot(&v);
    let term2 = gram * vsv;
    let gu = gram * &u;
    let term3 = gu * (v.transpose() * &se_mt) * T::of(2.0);
    term1 + term2 - term3
}

/// Plug-in variance of the contrast `a' u_hat_k` (before the `1/n`
/// standardization).
pub fn variance_u<T: Scalar>(
    ctx: &LayerContext<T>,
    triple: &SvdTriple<T>,
    gram: &Mat<T>,
    sigma_e: &Mat<T>,
    a: &Col<T>,
) -> T {
    let inner = variance_inner(ctx, triple, gram, sigma_e);
    let wa = ctx.w_k.transpose() * a;
    (inner * &wa).dot(&wa)
}

/// Plug-in variance of `d2_hat_k`: the `a = u_k` contrast scaled by 4.
pub fn variance_d2<T: Scalar>(
    ctx: &LayerContext<T>,
    triple: &SvdTriple<T>,
    gram: &Mat<T>,
    sigma_e: &Mat<T>,
) -> T {
    variance_u(ctx, triple, gram, sigma_e, &triple.u(ctx.k - 1)) * T::of(4.0)
}

/// Debiased estimate, variances, and diagnostics for one layer. If the
/// thresholded covariance produces a non-positive variance, the raw
/// (unthresholded) covariance is tried before the layer is failed.
pub fn debias_layer<T: Scalar>(
    triple: &SvdTriple<T>,
    data: &RegressionData<T>,
    theta: &Mat<T>,
    sigma_e: &Mat<T>,
    raw_sigma_e: Option<&Mat<T>>,
    k: usize,
    variant: NuisanceVariant,
) -> Result<DebiasedLayer<T>> {
    let ctx = build_context(triple, data, theta, k, variant)?;
    let psi = score(triple, data, &ctx.m_k, &ctx.c1, k);
    let u_tilde = triple.u(k - 1);
    let w_psi = &ctx.w_k * &psi;
    let u_hat = &u_tilde - &w_psi;
    let d2_hat = u_tilde.norm_squared() - T::of(2.0) * u_tilde.dot(&w_psi);
    let gram = data.gram();

    let compute = |cov: &Mat<T>| -> (Col<T>, T) {
        let inner = variance_inner(&ctx, triple, gram, cov);
        let kmat = &ctx.w_k * inner * ctx.w_k.transpose();
        let var_u = Col::from_fn(kmat.nrows(), |j, _| kmat[(j, j)]);
        let var_d2 = (kmat * &u_tilde).dot(&u_tilde) * T::of(4.0);
        (var_u, var_d2)
    };
    let (mut var_u, mut var_d2) = compute(sigma_e);
    let mut var_fallback = false;
    let nonpos =
        |vu: &Col<T>, vd: T| vu.iter().any(|v| v.to_f64() <= 0.0) || vd.to_f64() <= 0.0;
    if nonpos(&var_u, var_d2) {
        if let Some(raw) = raw_sigma_e {
            let (vu, vd) = compute(raw);
            var_u = vu;
            var_d2 = vd;
            var_fallback = true;
        }
        if nonpos(&var_u, var_d2) {
            return Err(SofariError::NonPositiveVariance { k });
        }
    }
    Ok(DebiasedLayer {
        k,
        u_hat,
        d2_hat,
        var_u,
        var_d2,
        score: psi,
        var_fallback,
        context: ctx,
    })
}

/// Which debiasing construction a run should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Strong,
    Weak,
    /// Fit and debias on independent halves of the rows.
    Split,
    /// Pick Strong or Weak from the orthogonality diagnostics.
    Auto,
}

/// End-to-end pipeline configuration.
pub struct SofariOptions<T: Scalar> {
    pub sofar: SofarConfig,
    pub variant: Variant,
    pub nodewise: NodewiseConfig<T>,
    /// Covariance threshold multiplier.
    pub delta: T,
    /// Row-permutation seed for the split variant.
    pub split_seed: u64,
}

impl<T: Scalar> Default for SofariOptions<T> {
    fn default() -> Self {
        Self {
            sofar: SofarConfig::default(),
            variant: Variant::Weak,
            nodewise: NodewiseConfig::default(),
            delta: T::of(2.0),
            split_seed: 0,
        }
    }
}

/// Complete run output. Layer failures are carried per layer so one
/// degenerate layer does not abort the rest.
pub struct SofariRun<T: Scalar> {
    pub estimate: SofarEstimate<T>,
    pub theta: ApproxInverse<T>,
    pub sigma_e: ErrorCovEstimate<T>,
    pub variant_used: NuisanceVariant,
    pub layers: Vec<Result<DebiasedLayer<T>>>,
}

fn resolve_variant<T: Scalar>(
    variant: Variant,
    triple: &SvdTriple<T>,
    data: &RegressionData<T>,
) -> NuisanceVariant {
    match variant {
        Variant::Strong => NuisanceVariant::Strong,
        Variant::Weak | Variant::Split => NuisanceVariant::Weak,
        Variant::Auto => diagnose_orthogonality(triple, data).recommended,
    }
}

/// Fit, build the approximate inverse and residual covariance, debias
/// every layer.
pub fn run_sofari<T: Scalar>(
    data: &RegressionData<T>,
    opts: &SofariOptions<T>,
) -> Result<SofariRun<T>> {
    if opts.variant == Variant::Split {
        return run_sofari_split(data, opts);
    }
    let estimate = fit_sofar(data, &opts.sofar)?;
    finish_run(data, estimate, opts)
}

fn finish_run<T: Scalar>(
    data: &RegressionData<T>,
    estimate: SofarEstimate<T>,
    opts: &SofariOptions<T>,
) -> Result<SofariRun<T>> {
    let theta = nodewise_precision(data.x(), &opts.nodewise)?;
    let resid = residuals(data, &estimate.c_tilde);
    let sigma_e = adaptive_threshold_cov(&resid, opts.delta)?;
    let raw = adaptive_threshold_cov(&resid, T::zero())?;
    let variant_used = resolve_variant(opts.variant, &estimate.triple, data);
    let r = estimate.triple.rank();
    let layers: Vec<Result<DebiasedLayer<T>>> = (1..=r)
        .into_par_iter()
        .map(|k| {
            debias_layer(
                &estimate.triple,
                data,
                &theta.theta,
                &sigma_e.sigma,
                Some(&raw.sigma),
                k,
                variant_used,
            )
        })
        .collect();
    Ok(SofariRun {
        estimate,
        theta,
        sigma_e,
        variant_used,
        layers,
    })
}

/// Split variant: rows are permuted by a seeded shuffle and halved; the
/// second half fits the initial estimate, the first half supplies the
/// approximate inverse, residual covariance, and debiasing data. An odd
/// last row is dropped.
pub fn run_sofari_split<T: Scalar>(
    data: &RegressionData<T>,
    opts: &SofariOptions<T>,
) -> Result<SofariRun<T>> {
    let n = data.n() - data.n() % 2;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.split_seed);
    idx.shuffle(&mut rng);
    let take = |rows: &[usize], m: &Mat<T>| -> Mat<T> {
        Mat::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
    };
    let half = n / 2;
    let fold1 = RegressionData::new(take(&idx[..half], data.x()), take(&idx[..half], data.y()))?;
    let fold2 = RegressionData::new(take(&idx[half..], data.x()), take(&idx[half..], data.y()))?;
    run_sofari_on_folds(&fold2, &fold1, opts)
}

/// Split internals with explicit folds: fit on `fit_data`, debias with
/// `debias_data`.
pub fn run_sofari_on_folds<T: Scalar>(
    fit_data: &RegressionData<T>,
    debias_data: &RegressionData<T>,
    opts: &SofariOptions<T>,
) -> Result<SofariRun<T>> {
    let estimate = fit_sofar(fit_data, &opts.sofar)?;
    finish_run(debias_data, estimate, opts)
}

/// Orthogonality diagnostics for variant selection.
#[derive(Debug, Clone)]
pub struct OrthoDiagnostics {
    /// Per layer: total cross-layer factor correlation against all others.
    pub strong_stats: Vec<f64>,
    /// Per layer: trailing-layer correlation weighted by the strength
    /// ratios that drive the weak variant's intrinsic bias.
    pub weak_stats: Vec<f64>,
    /// Separations of consecutive squared strengths.
    pub eigengaps: Vec<f64>,
    /// Decision threshold applied to the strong statistics.
    pub threshold: f64,
    pub recommended: NuisanceVariant,
}

pub fn diagnose_orthogonality<T: Scalar>(
    triple: &SvdTriple<T>,
    data: &RegressionData<T>,
) -> OrthoDiagnostics {
    let gram = data.gram();
    let r = triple.rank();
    let sl = gram * triple.l();
    let cross = triple.l().transpose() * sl; // r x r, l_i' Gram l_j
    let mut strong_stats = Vec::with_capacity(r);
    let mut weak_stats = Vec::with_capacity(r);
    for k in 0..r {
        let mut s = 0.0;
        let mut w = 0.0;
        for j in 0..r {
            if j == k {
                continue;
            }
            let c = cross[(j, k)].to_f64().abs();
            s += c;
            if j > k {
                let dj = triple.d()[j].to_f64();
                let dk = triple.d()[k].to_f64();
                w += dj * dj / dk * c;
            }
        }
        strong_stats.push(s);
        weak_stats.push(w);
    }
    let eigengaps = (0..r - 1)
        .map(|k| {
            let a = triple.d()[k].to_f64();
            let b = triple.d()[k + 1].to_f64();
            a * a - b * b
        })
        .collect();
    // The cross terms carry O(n^{-1/2}) sampling noise even for exactly
    // orthogonal factors, so the cutoff sits at twice that scale.
    let threshold = 2.0 / (data.n() as f64).sqrt();
    let recommended = if strong_stats.iter().all(|&s| s < threshold) {
        NuisanceVariant::Strong
    } else {
        NuisanceVariant::Weak
    };
    OrthoDiagnostics {
        strong_stats,
        weak_stats,
        eigengaps,
        threshold,
        recommended,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_instance, SimSetting};
    use crate::model::{compose_coefficient, grad_u_peeled, grad_v_peeled};
    use crate::sofar::{LambdaSpec, RankSpec};
    use crate::testutil::{random_orthonormal, seeded_rng};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    type M = Mat<f64>;
    type C = Col<f64>;

    /// Exact-Gram design: sqrt(n) times an orthonormal frame, so
    /// n^-1 X'X = I identically.
    fn identity_gram_data(n: usize, p: usize, c: &M, rng: &mut ChaCha8Rng) -> RegressionData<f64> {
        let q = random_orthonormal::<f64>(n, p, rng);
        let x = q * (n as f64).sqrt();
        let y = &x * c;
        RegressionData::new(x, y).unwrap()
    }

    fn random_triple(p: usize, q: usize, d: &[f64], rng: &mut ChaCha8Rng) -> SvdTriple<f64> {
        let l = random_orthonormal::<f64>(p, d.len(), rng);
        let v = random_orthonormal::<f64>(q, d.len(), rng);
        SvdTriple::new(l, C::from_vec(d.to_vec()), v).unwrap()
    }

    #[test]
    fn m_strong_rank2_reduction() {
        let mut rng = seeded_rng(71);
        let t = random_triple(6, 5, &[4.0, 1.5], &mut rng);
        let x = DMatrix::from_fn(40, 6, |_, _| f64::std_normal(&mut rng));
        let data = RegressionData::new(x.clone(), &x * compose_coefficient(&t)).unwrap();
        let gram = data.gram();
        let m = build_m(&t, gram, 1, NuisanceVariant::Strong).unwrap();
        let u1 = t.u(0);
        let z11 = (gram * &u1).dot(&u1);
        let oracle = gram * t.u(1) * t.v_col(1).transpose() * (-1.0 / z11);
        assert!((m - oracle).amax() <= 1e-14);
    }

    #[test]
    fn m_strong_identity_gram_annihilation() {
        let mut rng = seeded_rng(72);
        let t = random_triple(6, 5, &[3.0, 2.0, 1.0], &mut rng);
        let gram = M::identity(6, 6);
        let m = build_m(&t, &gram, 2, NuisanceVariant::Strong).unwrap();
        let z = t.d()[1] * t.d()[1];
        // M v_j = -z^-1 u_j for the other layers, M v_k = 0
        for j in [0usize, 2] {
            let got = &m * t.v_col(j);
            let expect = t.u(j) * (-1.0 / z);
            assert!((got - expect).amax() <= 1e-13);
        }
        assert!((&m * t.v_col(1)).amax() <= 1e-13);
    }

    #[test]
    fn m_matches_literal_product() {
        let mut rng = seeded_rng(73);
        for _ in 0..10 {
            let t = random_triple(7, 6, &[5.0, 2.0, 0.8], &mut rng);
            let x = DMatrix::from_fn(50, 7, |_, _| f64::std_normal(&mut rng));
            let data = RegressionData::new(x.clone(), M::zeros(50, 6)).unwrap();
            let gram = data.gram();
            for k in 1..=3 {
                for variant in [NuisanceVariant::Strong, NuisanceVariant::Weak] {
                    let m = build_m(&t, gram, k, variant).unwrap();
                    let mut c_other = M::zeros(7, 6);
                    for i in other_indices(3, k, variant) {
                        c_other += t.u(i) * t.v_col(i).transpose();
                    }
                    let uk = t.u(k - 1);
                    let z = (gram * &uk).dot(&uk);
                    let oracle = gram * c_other * (-1.0 / z);
                    assert!((m - oracle).amax() <= 1e-13);
                }
            }
        }
    }

    fn prop_identity_gap(
        t: &SvdTriple<f64>,
        gram: &M,
        theta: &M,
        k: usize,
        variant: NuisanceVariant,
    ) -> f64 {
        let p = gram.nrows();
        let m = build_m(t, gram, k, variant).unwrap();
        let w = build_w(t, gram, theta, k, variant).unwrap();
        let mut c_other = M::zeros(p, t.v().nrows());
        for i in other_indices(t.rank(), k, variant) {
            c_other += t.u(i) * t.v_col(i).transpose();
        }
        let a = M::identity(p, p) - &m * t.v_col(k - 1) * t.u(k - 1).transpose()
            + &m * c_other.transpose();
        ((w * a - theta) * gram).amax()
    }

    #[test]
    fn w_identities_strong_and_weak() {
        let mut rng = seeded_rng(74);
        for trial in 0..25 {
            let t = random_triple(8, 6, &[6.0, 2.5, 1.0], &mut rng);
            let x = DMatrix::from_fn(60, 8, |_, _| f64::std_normal(&mut rng));
            let data = RegressionData::new(x, M::zeros(60, 6)).unwrap();
            let gram = data.gram();
            let theta = gram.clone().try_inverse().unwrap();
            for k in 1..=3 {
                for variant in [NuisanceVariant::Strong, NuisanceVariant::Weak] {
                    let gap = prop_identity_gap(&t, gram, &theta, k, variant);
                    assert!(gap <= 1e-9, "trial {trial} k={k} gap {gap:.2e}");
                }
            }
        }
    }

    #[test]
    fn w_rank2_closed_form() {
        let mut rng = seeded_rng(75);
        let t = random_triple(6, 5, &[4.0, 1.5], &mut rng);
        let x = DMatrix::from_fn(50, 6, |_, _| f64::std_normal(&mut rng));
        let data = RegressionData::new(x, M::zeros(50, 5)).unwrap();
        let gram = data.gram();
        let theta = gram.clone().try_inverse().unwrap();
        let w = build_w(&t, gram, &theta, 1, NuisanceVariant::Strong).unwrap();
        let u1 = t.u(0);
        let u2 = t.u(1);
        let z11 = (gram * &u1).dot(&u1);
        let z22 = (gram * &u2).dot(&u2);
        let oracle =
            &theta * (M::identity(6, 6) + gram * &u2 * u2.transpose() / (z11 - z22));
        assert!((w - oracle).amax() <= 1e-12);
    }

    #[test]
    fn w_spectral_oracle_identity_design() {
        // Theta = Gram = I, orthonormal factors: W acts as
        // d_k^2 / (d_k^2 - d_i^2) on each other factor direction and as
        // the identity on the complement
        let mut rng = seeded_rng(76);
        let t = random_triple(7, 5, &[3.0, 2.0, 1.0], &mut rng);
        let eye = M::identity(7, 7);
        for k in 1..=3 {
            let w = build_w(&t, &eye, &eye, k, NuisanceVariant::Strong).unwrap();
            let zk = t.d()[k - 1] * t.d()[k - 1];
            for i in 0..3 {
                let li: C = t.l().column(i).into();
                let got = &w * &li;
                let factor = if i + 1 == k {
                    1.0
                } else {
                    let zi = t.d()[i] * t.d()[i];
                    zk / (zk - zi)
                };
                assert!((got - &li * factor).amax() <= 1e-12, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn weak_last_layer_collapses() {
        let mut rng = seeded_rng(77);
        let t = random_triple(6, 5, &[4.0, 2.0, 1.0], &mut rng);
        let x = DMatrix::from_fn(50, 6, |_, _| f64::std_normal(&mut rng));
        let data = RegressionData::new(x, M::zeros(50, 5)).unwrap();
        let gram = data.gram();
        let theta = gram.clone().try_inverse().unwrap();
        let m = build_m(&t, gram, 3, NuisanceVariant::Weak).unwrap();
        assert_eq!(m.amax(), 0.0);
        let w = build_w(&t, gram, &theta, 3, NuisanceVariant::Weak).unwrap();
        assert_eq!(w, theta);
    }

    #[test]
    fn weak_equals_strong_at_k1() {
        let s = SimSetting::setting_1(78);
        let inst = gen_instance::<f64>(&s, 0).unwrap();
        let est = fit_sofar(
            &inst.data,
            &SofarConfig {
                rank: RankSpec::Fixed(3),
                ..SofarConfig::default()
            },
        )
        .unwrap();
        let gram = inst.data.gram();
        let theta = gram.clone().try_inverse().unwrap();
        let ms = build_m(&est.triple, gram, 1, NuisanceVariant::Strong).unwrap();
        let mw = build_m(&est.triple, gram, 1, NuisanceVariant::Weak).unwrap();
        assert!((ms - mw).amax() <= 1e-13);
        let ws = build_w(&est.triple, gram, &theta, 1, NuisanceVariant::Strong).unwrap();
        let ww = build_w(&est.triple, gram, &theta, 1, NuisanceVariant::Weak).unwrap();
        assert!((&ws - &ww).amax() <= 1e-13);
        let cs = build_context(&est.triple, &inst.data, &theta, 1, NuisanceVariant::Strong)
            .unwrap();
        let cw =
            build_context(&est.triple, &inst.data, &theta, 1, NuisanceVariant::Weak).unwrap();
        let ss = score(&est.triple, &inst.data, &cs.m_k, &cs.c1, 1);
        let sw = score(&est.triple, &inst.data, &cw.m_k, &cw.c1, 1);
        assert!((ss - sw).amax() <= 1e-13);
    }

    #[test]
    fn score_matches_gradient_composition() {
        // oracle: the stacked-derivative definition evaluated through the
        // shared gradient routines
        let s = SimSetting::setting_1(79);
        let inst = gen_instance::<f64>(&s, 0).unwrap();
        let est = fit_sofar(
            &inst.data,
            &SofarConfig {
                rank: RankSpec::Fixed(3),
                ..SofarConfig::default()
            },
        )
        .unwrap();
        let t = &est.triple;
        let gram = inst.data.gram();
        let theta = gram.clone().try_inverse().unwrap();
        for variant in [NuisanceVariant::Strong, NuisanceVariant::Weak] {
            for k in 1..=3 {
                let ctx = build_context(t, &inst.data, &theta, k, variant).unwrap();
                let psi = score(t, &inst.data, &ctx.m_k, &ctx.c1, k);
                let u_set: Vec<C> = t.u_cols();
                let v_set: Vec<C> = t.v_cols();
                let gu = grad_u_peeled(&inst.data, &ctx.c1, &u_set, &v_set, k - 1).unwrap();
                let gv = grad_v_peeled(&inst.data, &ctx.c1, &u_set, &v_set, k - 1).unwrap();
                let oracle = gu - &ctx.m_k * gv;
                assert!((psi - oracle).amax() <= 1e-13, "k={k} {variant:?}");
            }
        }
    }

    #[test]
    fn trivial_exactness_identity_gram_noiseless() {
        let mut rng = seeded_rng(80);
        let t = random_triple(6, 5, &[4.0, 2.0, 1.0], &mut rng);
        let c = compose_coefficient(&t);
        let data = identity_gram_data(30, 6, &c, &mut rng);
        let theta = M::identity(6, 6);
        let sigma_e = M::identity(5, 5);
        for variant in [NuisanceVariant::Strong, NuisanceVariant::Weak] {
            for k in 1..=3 {
                let layer =
                    debias_layer(&t, &data, &theta, &sigma_e, None, k, variant).unwrap();
                let u_star = t.u(k - 1);
                assert!(
                    (&layer.u_hat - &u_star).amax() <= 1e-10,
                    "u gap {:?}",
                    (&layer.u_hat - &u_star).amax()
                );
                let d2 = t.d()[k - 1] * t.d()[k - 1];
                assert!((layer.d2_hat - d2).abs() <= 1e-9);
                assert!(layer.score.amax() <= 1e-10);
            }
        }
    }

    #[test]
    fn score_locality_at_truth() {
        // with the exact truth and no noise the unprojected residual part
        // of the score vanishes on the v_k tangent space
        let mut rng = seeded_rng(81);
        let t = random_triple(6, 5, &[4.0, 2.0, 1.0], &mut rng);
        let c = compose_coefficient(&t);
        let data = identity_gram_data(30, 6, &c, &mut rng);
        let delta = data.gram() * &c - data.xty();
        for k in 0..3 {
            let v = t.v_col(k);
            let proj = &delta * (M::identity(5, 5) - &v * v.transpose());
            assert!(proj.amax() <= 1e-10);
        }
    }

    #[test]
    fn variance_closed_form_collapse() {
        // Gram = Theta = I and M = 0 (last weak layer): the variance is
        // (v'Se v) ||a||^2
        let mut rng = seeded_rng(82);
        let t = random_triple(6, 5, &[4.0, 2.0, 1.0], &mut rng);
        let eye6 = M::identity(6, 6);
        let x = DMatrix::from_fn(36, 6, |_, _| f64::std_normal(&mut rng));
        let data = identity_gram_data(36, 6, &compose_coefficient(&t), &mut rng);
        let _ = x;
        let ctx = build_context(&t, &data, &eye6, 3, NuisanceVariant::Weak).unwrap();
        let sigma_e = M::identity(5, 5);
        let a = C::from_fn(6, |_, _| f64::std_normal(&mut rng));
        let v = variance_u(&ctx, &t, data.gram(), &sigma_e, &a);
        assert_relative_eq!(v, a.norm_squared(), max_relative = 1e-9);
        // zero covariance gives zero variance
        let v0 = variance_u(&ctx, &t, data.gram(), &M::zeros(5, 5), &a);
        assert!(v0.abs() <= 1e-15);
    }

    #[test]
    fn variance_term_by_term_oracle() {
        let mut rng = seeded_rng(83);
        let s = SimSetting::setting_1(83);
        let inst = gen_instance::<f64>(&s, 0).unwrap();
        let est = fit_sofar(
            &inst.data,
            &SofarConfig {
                rank: RankSpec::Fixed(3),
                ..SofarConfig::default()
            },
        )
        .unwrap();
        let t = &est.triple;
        let gram = inst.data.gram();
        let theta = gram.clone().try_inverse().unwrap();
        let se = &inst.sigma_e;
        for k in 1..=3 {
            let ctx = build_context(t, &inst.data, &theta, k, NuisanceVariant::Strong).unwrap();
            let a = C::from_fn(25, |_, _| f64::std_normal(&mut rng));
            let got = variance_u(&ctx, t, gram, se, &a);
            // literal three-term oracle
            let u = t.u(k - 1);
            let v = t.v_col(k - 1);
            let wa = ctx.w_k.transpose() * &a;
            let t1 = ctx.z_kk * (se * ctx.m_k.transpose() * &wa).dot(&(ctx.m_k.transpose() * &wa));
            let t2 = (se * &v).dot(&v) * (gram * &wa).dot(&wa);
            let t3 = 2.0 * (gram * &u).dot(&wa) * (se * ctx.m_k.transpose() * &wa).dot(&v);
            let oracle = t1 + t2 - t3;
            assert_relative_eq!(got, oracle, max_relative = 1e-12);
            // d2 variance is the u-contrast scaled by 4
            let vd = variance_d2(&ctx, t, gram, se);
            let vu = variance_u(&ctx, t, gram, se, &u);
            assert_relative_eq!(vd, 4.0 * vu, max_relative = 1e-12);
        }
    }

    fn quick_opts() -> SofariOptions<f64> {
        SofariOptions {
            sofar: SofarConfig {
                rank: RankSpec::Fixed(3),
                lambda: LambdaSpec::Auto,
                ..SofarConfig::default()
            },
            ..SofariOptions::default()
        }
    }

    #[test]
    fn end_to_end_run_setting_1() {
        let s = SimSetting::setting_1(84);
        let inst = gen_instance::<f64>(&s, 0).unwrap();
        let run = run_sofari(&inst.data, &quick_opts()).unwrap();
        assert_eq!(run.layers.len(), 3);
        for layer in &run.layers {
            let layer = layer.as_ref().unwrap();
            assert!(layer.var_d2 > 0.0);
            assert!(layer.var_u.iter().all(|v| *v > 0.0));
        }
        // determinism
        let run2 = run_sofari(&inst.data, &quick_opts()).unwrap();
        let a = run.layers[0].as_ref().unwrap();
        let b = run2.layers[0].as_ref().unwrap();
        assert_eq!(a.u_hat, b.u_hat);
        assert_eq!(a.d2_hat, b.d2_hat);
    }

    #[test]
    fn split_with_identical_folds_matches_plain_run() {
        let s = SimSetting::setting_1(85);
        let inst = gen_instance::<f64>(&s, 0).unwrap();
        let opts = quick_opts();
        let plain = run_sofari(&inst.data, &opts).unwrap();
        let folds = run_sofari_on_folds(&inst.data, &inst.data, &opts).unwrap();
        let a = plain.layers[0].as_ref().unwrap();
        let b = folds.layers[0].as_ref().unwrap();
        assert!((&a.u_hat - &b.u_hat).amax() <= 1e-10);
        assert!((a.d2_hat - b.d2_hat).abs() <= 1e-10);
    }

    #[test]
    fn split_run_is_deterministic_and_sane() {
        let s = SimSetting::setting_1(86);
        let inst = gen_instance::<f64>(&s, 0).unwrap();
        let opts = SofariOptions {
            variant: Variant::Split,
            ..quick_opts()
        };
        let r1 = run_sofari(&inst.data, &opts).unwrap();
        let r2 = run_sofari(&inst.data, &opts).unwrap();
        let a = r1.layers[0].as_ref().unwrap();
        let b = r2.layers[0].as_ref().unwrap();
        assert_eq!(a.u_hat, b.u_hat);
        // the top-layer estimate should sit near the truth
        let u_star = inst.truth.u(0);
        let aligned = if a.u_hat.dot(&u_star) < 0.0 {
            -a.u_hat.clone()
        } else {
            a.u_hat.clone()
        };
        assert!((aligned - u_star).amax() < 5.0);
    }

    #[test]
    fn diagnose_identity_design() {
        let mut rng = seeded_rng(87);
        let t = random_triple(6, 5, &[4.0, 2.0, 1.0], &mut rng);
        let data = identity_gram_data(30, 6, &compose_coefficient(&t), &mut rng);
        let d = diagnose_orthogonality(&t, &data);
        assert!(d.strong_stats.iter().all(|&s| s <= 1e-10));
        assert!(d.weak_stats.iter().all(|&s| s <= 1e-8));
        assert_eq!(d.recommended, NuisanceVariant::Strong);
        assert_relative_eq!(d.eigengaps[0], 12.0, epsilon = 1e-9);
    }

    #[test]
    fn diagnose_design_families() {
        // both designs produce cross statistics with O(n^-1/2) sampling
        // noise, so per-seed classification is noisy; the weakly-orthogonal
        // design should clear the threshold most of the time and should sit
        // lower on average than the i.i.d. AR(1) design
        let mut strong_ok = 0;
        let mut sum_orth = 0.0;
        let mut sum_iid = 0.0;
        for seed in 0..10 {
            let s1 = SimSetting::setting_1(88 + seed);
            let i1 = gen_instance::<f64>(&s1, 0).unwrap();
            let d1 = diagnose_orthogonality(&i1.truth, &i1.data);
            if d1.recommended == NuisanceVariant::Strong {
                strong_ok += 1;
            }
            sum_orth += d1.strong_stats.iter().cloned().fold(0.0, f64::max);
            let s3 = SimSetting::setting_3(88 + seed);
            let i3 = gen_instance::<f64>(&s3, 0).unwrap();
            let d3 = diagnose_orthogonality(&i3.truth, &i3.data);
            sum_iid += d3.strong_stats.iter().cloned().fold(0.0, f64::max);
        }
        assert!(strong_ok >= 6, "strong recommended only {strong_ok}/10");
        assert!(
            sum_orth < sum_iid,
            "orth mean {sum_orth} not below iid mean {sum_iid}"
        );
    }

    #[test]
    fn appendix_counterexample_reduced_matrix_is_singular() {
        // the non-manifold two-layer construction: eliminating the
        // nuisance through the full Euclidean (unprojected) system leaves
        // a 2x2 reduced matrix I + R L that is exactly singular
        let mut rng = seeded_rng(89);
        let t = random_triple(6, 5, &[4.0, 1.5], &mut rng);
        let x = DMatrix::from_fn(40, 6, |_, _| f64::std_normal(&mut rng));
        let data = RegressionData::new(x, M::zeros(40, 5)).unwrap();
        let gram = data.gram();
        let u1 = t.u(0);
        let u2 = t.u(1);
        let z11 = (gram * &u1).dot(&u1);
        let z12 = (gram * &u1).dot(&u2);
        let z22 = (gram * &u2).dot(&u2);
        let det = z11 * z22 - z12 * z12;
        let alpha1 = -z12 / det;
        let alpha2 = (1.0 + z12 * z12 / det) / z11;
        let beta1 = z11 / det;
        let beta2 = -z12 / det;
        // L2 = [-Gram u1, -Gram u2] (p x 2), R2 rows from the alpha/beta
        // combinations (2 x p)
        let mut l2 = M::zeros(6, 2);
        l2.set_column(0, &(-(gram * &u1)));
        l2.set_column(1, &(-(gram * &u2)));
        let mut r2 = M::zeros(2, 6);
        r2.set_row(0, &(&u1 * alpha2 + &u2 * beta2).transpose());
        r2.set_row(1, &(&u1 * alpha1 + &u2 * beta1).transpose());
        let reduced = M::identity(2, 2) + r2 * l2;
        let det2 = reduced[(0, 0)] * reduced[(1, 1)] - reduced[(0, 1)] * reduced[(1, 0)];
        assert!(det2.abs() <= 1e-10, "determinant {det2:.2e}");
    }
}
