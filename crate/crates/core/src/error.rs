use thiserror::Error;

/// Errors surfaced by the library. Soft failures (solver hitting its
/// iteration cap, a variance falling back to the unthresholded covariance)
/// are reported through flags on the result types instead.
#[derive(Debug, Error)]
pub enum SofariError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("log map undefined at antipodal points")]
    AntipodalPoint,

    #[error("support overflow: {0}")]
    SupportOverflow(String),

    #[error("rank-deficient design: condition number {0:.3e}")]
    RankDeficiency(f64),

    #[error("requested rank {requested} exceeds min(p, q) = {max}")]
    RankTooLarge { requested: usize, max: usize },

    #[error("degenerate layer {k}: z_kk = {z:.3e}")]
    DegenerateLayer { k: usize, z: f64 },

    #[error("singular inner matrix at layer {k} (condition number {cond:.3e})")]
    SingularInnerMatrix { k: usize, cond: f64 },

    #[error("column {j} is numerically collinear with the rest (tau^2 = {tau2:.3e})")]
    DegenerateColumn { j: usize, tau2: f64 },

    #[error("non-positive variance estimate at layer {k}")]
    NonPositiveVariance { k: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = SofariError> = std::result::Result<T, E>;
