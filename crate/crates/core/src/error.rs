use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("treatment interval {0} is empty")]
    EmptyInterval(usize),

    #[error("interval {interval} has {count} observations, need at least {needed}")]
    SparseInterval {
        interval: usize,
        count: usize,
        needed: usize,
    },

    #[error("degenerate truncation: interval mass underflows at mean {mean} and scale {sigma}")]
    DegenerateTruncation { mean: f64, sigma: f64 },

    #[error("degenerate residuals: {0}")]
    DegenerateResiduals(String),

    #[error("unbounded leaf solve (G = {grad}, H + 2 lambda = 0)")]
    UnboundedLeaf { grad: f64 },

    #[error("feature count mismatch: model expects {expected}, got {got}")]
    FeatureMismatch { expected: usize, got: usize },

    #[error("no overlap: policy {policy} has zero propensity for its own interval {interval}")]
    NoOverlap { policy: usize, interval: usize },

    #[error("rank-deficient design: collinear columns {0:?}")]
    RankDeficient(Vec<String>),

    #[error("did not converge after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
