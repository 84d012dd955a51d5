use thiserror::Error;

pub type Result<T, E = GiqsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GiqsError {
    #[error("point {0:?} lies outside the model cone")]
    OutOfCone(Vec<f64>),

    #[error("|a| = {norm} is inside the regularization radius {radius}; h_L is not evaluated there")]
    OutOfDomain { norm: f64, radius: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("bracketing failed: {0}")]
    Bracket(String),

    #[error("tolerance not reached after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("{what} needs about {needed_mb:.1} MB, budget is {budget_mb} MB")]
    Budget {
        what: &'static str,
        needed_mb: f64,
        budget_mb: u64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not steep: vanishing gradient (inf |w| = {0:e})")]
    VanishingGradient(f64),

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("degenerate line: it leaves the domain immediately")]
    DegenerateLine,

    #[error("perturbation kind `{kind}` is not available for the {model} model")]
    ModelMismatch { kind: String, model: String },

    #[error("averaging grid too coarse: aliasing error {0:e}")]
    Aliasing(f64),

    #[error("normal form diverged at step {step}: off-block mass {before:e} -> {after:e}")]
    Divergence { step: usize, before: f64, after: f64 },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("tail mass {max_tail:e} exceeds the validity threshold {threshold:e} inside the fit window")]
    TruncationContaminated { max_tail: f64, threshold: f64 },

    #[error("time step rejected: L2 drift {drift:e} after {halvings} halvings")]
    StepRejected { drift: f64, halvings: usize },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("invalid configuration:\n{0}")]
    Config(crate::config::ConfigErrors),

    #[error("container format: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GiqsError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GiqsError::InvalidArgument(msg.into())
    }
}
