use thiserror::Error;

/// Errors surfaced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is singular or rank deficient: {0}")]
    RankDeficient(String),

    #[error("domain error: {0}")]
    DomainError(String),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("activation-norm scale {0:.3e} is too close to zero")]
    ZeroScale(f64),
    #[error("conditioner produced a non-finite output")]
    NonFiniteNetworkOutput,
    #[error("spline bin {what} {value:.3e} below the minimum")]
    DegenerateBin { what: &'static str, value: f64 },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    CorruptFile(String),

    #[error("unsupported channel for this operation: {0}")]
    UnsupportedSpec(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error("score form not available for this flow: {0}")]
    UnsupportedFlow(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trusted-region retention {retained}/{drawn} fell below 1%")]
    RetentionTooLow { retained: usize, drawn: usize },
    #[error("Fisher matrix is degenerate (λ_min = {lambda_min:.3e}, λ_max = {lambda_max:.3e})")]
    DegenerateFim { lambda_min: f64, lambda_max: f64 },
    #[error("reference matrix has zero norm")]
    ZeroTruth,
    #[error("reference signal has a zero entry at index {0}")]
    ZeroReference(usize),

    #[error("flow matrix L is singular")]
    SingularL,
    #[error("parameter must be positive, got {0}")]
    NonPositiveTheta(f64),
    #[error("Fisher information is singular: {0}")]
    SingularInformation(String),
    #[error("noise variance is not positive: {0}")]
    DegenerateNoise(String),
    #[error("unsupported dimension {found}: {reason}")]
    UnsupportedDimension { found: usize, reason: &'static str },
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
