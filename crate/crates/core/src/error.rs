use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants split into input problems (bad files, invalid configurations,
/// violated data invariants) and numerical failures (rank deficiency,
/// non-convergence, degenerate variance terms); see [`Error::is_numerical`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-finite or missing value at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("non-positive weight {weight} at row {row}")]
    NonPositiveWeight { row: usize, weight: f64 },
    #[error("inconsistent treatment within cluster `{cluster}` (line {line})")]
    InconsistentTreatment { cluster: String, line: u64 },
    #[error("invalid treatment value `{value}` at line {line}; expected 0 or 1")]
    InvalidTreatment { value: String, line: u64 },
    #[error("record at row {row} has {found} covariates, expected {expected}")]
    CovariateLength { row: usize, found: usize, expected: usize },
    #[error("cluster `{0}` has no assignment")]
    UnassignedCluster(String),
    #[error("cluster `{0}` has no records")]
    EmptyCluster(String),
    #[error("no clusters in the {0} arm")]
    EmptyArm(&'static str),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("covariate `{name}` (index {index}) has zero variance across clusters")]
    ZeroVarianceCovariate { index: usize, name: String },
    #[error("design matrix is rank deficient at column `{0}`")]
    RankDeficient(String),
    #[error("insufficient degrees of freedom in the {arm} arm: need {required:.3} > 0, have {available:.3}")]
    InsufficientDf {
        arm: &'static str,
        required: f64,
        available: f64,
    },
    #[error("treatment is perfectly predicted by the covariates (R^2 = {0})")]
    DegenerateRSquared(f64),
    #[error("estimated variance is zero or not finite ({0})")]
    DegenerateVariance(f64),
    #[error("coordinate descent did not converge in {limit} sweeps at lambda = {lambda}")]
    MaxIterationsExceeded { limit: usize, lambda: f64 },
    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),
    #[error("lasso fit at lambda = {lambda} fails KKT check (violation {violation:e})")]
    KktViolation { lambda: f64, violation: f64 },
    #[error("leave-one-out cross-validation needs at least 3 clusters, got {0}; skip covariate selection")]
    TooFewClusters(usize),
    #[error("support block of the second-moment matrix is singular")]
    SingularSupportBlock,
    #[error("design column `{0}` is not standardized")]
    NotStandardized(String),
    #[error("no replications requested")]
    NoReplications,
    #[error("{failed} of {total} replications failed, above the 5% abort threshold")]
    FailureRateExceeded { failed: usize, total: usize },
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroVarianceCovariate { .. }
                | Error::RankDeficient(_)
                | Error::InsufficientDf { .. }
                | Error::DegenerateRSquared(_)
                | Error::DegenerateVariance(_)
                | Error::MaxIterationsExceeded { .. }
                | Error::KktViolation { .. }
                | Error::SingularSupportBlock
                | Error::FailureRateExceeded { .. }
        )
    }
}
