//! Confidence intervals, standardized statistics, p-values, BH selection,
//! and the Monte-Carlo coverage harness.
//!
//! Everything here works in `f64`: the outputs are report numbers, not
//! model state, and the normal quantile/CDF backend is `f64`-only.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datagen::{gen_instance, SimSetting};
use crate::debias::{run_sofari, SofariOptions};
use crate::error::{Result, SofariError};
use crate::model::SvdTriple;

/// Two-sided normal confidence interval for one scalar component.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    /// Confidence level, `1 - alpha`.
    pub level: f64,
    pub center: f64,
    pub half_width: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `center ± z_{1-alpha/2} sqrt(variance / n)`.
pub fn ci(center: f64, variance: f64, n: usize, alpha: f64) -> Result<ConfidenceInterval> {
    if !(variance > 0.0) {
        return Err(SofariError::Config(format!(
            "confidence interval needs a positive variance, got {variance}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) || n == 0 {
        return Err(SofariError::Config(format!(
            "bad interval parameters alpha={alpha} n={n}"
        )));
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let half_width = z * (variance / n as f64).sqrt();
    Ok(ConfidenceInterval {
        lower: center - half_width,
        upper: center + half_width,
        level: 1.0 - alpha,
        center,
        half_width,
    })
}

/// `T = sqrt(n) (est - true) / sqrt(variance)`.
pub fn standardized_stat(est_value: f64, true_value: f64, variance: f64, n: usize) -> f64 {
    (n as f64).sqrt() * (est_value - true_value) / variance.sqrt()
}

/// Two-sided p-value `2 (1 - Phi(|t|))`.
pub fn pvalue_two_sided(t: f64) -> f64 {
    let p = 2.0 * Normal::standard().sf(t.abs());
    p.min(1.0)
}

/// Benjamini-Hochberg step-up: reject the `i` smallest p-values where `i`
/// is the largest index (1-based, after sorting) with `p_(i) <= i q / m`.
/// Returns the selected original indices in ascending order.
pub fn bh_fdr(pvals: &[f64], q: f64) -> Vec<usize> {
    let m = pvals.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    // stable sort keeps ties in original-index order
    order.sort_by(|&a, &b| pvals[a].partial_cmp(&pvals[b]).unwrap());
    let cutoff = order
        .iter()
        .enumerate()
        .rev()
        .find(|&(i, &j)| pvals[j] <= (i + 1) as f64 * q / m as f64)
        .map(|(i, _)| i + 1)
        .unwrap_or(0);
    let mut selected: Vec<usize> = order[..cutoff].to_vec();
    selected.sort_unstable();
    selected
}

/// One tabulated quantity in a coverage study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Entry `j` (0-based) of the layer-`k` (1-based) left factor vector.
    U { k: usize, j: usize },
    /// Squared singular value of layer `k` (1-based).
    D2 { k: usize },
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Component::U { k, j } => write!(f, "u_{k},{}", j + 1),
            Component::D2 { k } => write!(f, "d{k}^2"),
        }
    }
}

/// Empirical coverage and mean interval length for one component.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoverageSummary {
    pub component: Component,
    /// Fraction of replications whose interval covered the truth.
    pub cp: f64,
    pub mean_len: f64,
    /// Replications that produced a usable interval for this component.
    pub replications: usize,
}

/// Coverage summaries plus the raw standardized statistics behind them,
/// one vector per component (needed for the normality checks and KDEs).
#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub summaries: Vec<CoverageSummary>,
    pub components: Vec<Component>,
    /// `stats[c]` holds the standardized statistic of `components[c]` for
    /// every replication whose run succeeded.
    pub stats: Vec<Vec<f64>>,
    /// Replications whose fit or debiasing failed outright.
    pub failed_reps: usize,
}

/// The Table-1 row set: per layer the first `min(3, support)` nonzero
/// entries of the true factor vector, the last three entries, and the
/// squared singular value.
pub fn tabulated_components(truth: &SvdTriple<f64>, p: usize) -> Vec<Component> {
    let mut out = Vec::new();
    for k in 0..truth.rank() {
        let u = truth.u(k);
        let support: Vec<usize> = (0..p).filter(|&j| u[j] != 0.0).collect();
        for &j in support.iter().take(3) {
            out.push(Component::U { k: k + 1, j });
        }
        for j in p - 3..p {
            out.push(Component::U { k: k + 1, j });
        }
        out.push(Component::D2 { k: k + 1 });
    }
    out
}

struct RepRecord {
    /// Per component: (covered, interval length, standardized statistic).
    cells: Vec<Option<(bool, f64, f64)>>,
}

fn run_one_rep(
    setting: &SimSetting,
    opts: &SofariOptions<f64>,
    rep: u64,
    alpha: f64,
    components: &[Component],
) -> Result<RepRecord> {
    let instance = gen_instance::<f64>(setting, rep)?;
    let run = run_sofari(&instance.data, opts)?;
    let n = instance.data.n();
    let truth = &instance.truth;
    let cells = components
        .iter()
        .map(|&c| {
            let (k, est, var, target) = match c {
                Component::U { k, j } => {
                    let layer = run.layers.get(k - 1)?.as_ref().ok()?;
                    // SVD signs are arbitrary: align the estimated layer to
                    // the truth before reading off components
                    let sign = if run.estimate.triple.u(k - 1).dot(&truth.u(k - 1)) < 0.0 {
                        -1.0
                    } else {
                        1.0
                    };
                    (k, sign * layer.u_hat[j], layer.var_u[j], truth.u(k - 1)[j])
                }
                Component::D2 { k } => {
                    let layer = run.layers.get(k - 1)?.as_ref().ok()?;
                    let d = truth.d()[k - 1];
                    (k, layer.d2_hat, layer.var_d2, d * d)
                }
            };
            let _ = k;
            let interval = ci(est, var, n, alpha).ok()?;
            let t = standardized_stat(est, target, var, n);
            Some((interval.contains(target), interval.length(), t))
        })
        .collect();
    Ok(RepRecord { cells })
}

/// Monte-Carlo coverage study: generate, fit, and debias `replications`
/// independent data sets and tabulate per-component coverage probability
/// and mean interval length. Deterministic given the setting's seed;
/// replications run in parallel on independent RNG streams.
pub fn coverage_run(
    setting: &SimSetting,
    opts: &SofariOptions<f64>,
    replications: usize,
    alpha: f64,
) -> Result<CoverageReport> {
    if replications == 0 {
        return Err(SofariError::Config("replications must be positive".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SofariError::Config(format!("alpha {alpha} not in (0,1)")));
    }
    setting.validate()?;
    let components = tabulated_components(&crate::datagen::gen_truth(setting, 0)?, setting.p);
    let records: Vec<Result<RepRecord>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| run_one_rep(setting, opts, rep, alpha, &components))
        .collect();
    let failed_reps = records.iter().filter(|r| r.is_err()).count();
    let mut covered = vec![0usize; components.len()];
    let mut len_sum = vec![0.0; components.len()];
    let mut count = vec![0usize; components.len()];
    let mut stats = vec![Vec::new(); components.len()];
    for rec in records.into_iter().flatten() {
        for (c, cell) in rec.cells.into_iter().enumerate() {
            if let Some((cov, len, t)) = cell {
                covered[c] += usize::from(cov);
                len_sum[c] += len;
                count[c] += 1;
                stats[c].push(t);
            }
        }
    }
    let summaries = components
        .iter()
        .enumerate()
        .map(|(c, &component)| CoverageSummary {
            component,
            cp: if count[c] == 0 {
                f64::NAN
            } else {
                covered[c] as f64 / count[c] as f64
            },
            mean_len: if count[c] == 0 {
                f64::NAN
            } else {
                len_sum[c] / count[c] as f64
            },
            replications: count[c],
        })
        .collect();
    Ok(CoverageReport {
        summaries,
        components,
        stats,
        failed_reps,
    })
}

/// Gaussian-kernel density estimate on an even grid, Silverman bandwidth
/// `1.06 sd m^{-1/5}`. Returns `(grid, density)`.
pub fn kde_export(samples: &[f64], grid_points: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.is_empty() || grid_points < 2 {
        return Err(SofariError::Config(
            "kde needs samples and at least two grid points".into(),
        ));
    }
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
    // a single point (or constant sample) has sd 0; fall back to unit
    // bandwidth so the export is the kernel bump itself
    let bw = if sd > 0.0 {
        1.06 * sd * m.powf(-0.2)
    } else {
        1.0
    };
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * bw;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bw;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let norm = 1.0 / (m * bw * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&g| {
            norm * samples
                .iter()
                .map(|&x| (-0.5 * ((g - x) / bw).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok((grid, density))
}
