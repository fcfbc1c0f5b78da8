use thiserror::Error;

/// Errors surfaced by the library. Contract violations (dimension mismatches,
/// non-SPD covariances) are reported here rather than panicking so callers
/// can reject bad input files gracefully.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("motion matrix is numerically zero; scale and rotation are undefined")]
    DegenerateMotion,

    #[error("canonical alignment undefined: cross-covariance is rank-deficient (collinear landmarks)")]
    AlignmentUndefined,

    #[error("covariance matrix is not symmetric positive definite")]
    CovarianceNotSpd,

    #[error("average precision undefined: no ground-truth objects")]
    UndefinedAp,

    #[error("linear program is infeasible or unbounded: {0}")]
    LpFailed(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("patch at ({0}, {1}) leaves the image bounds")]
    PatchOutOfBounds(f64, f64),

    #[error("empty visibility mask: no landmarks to evaluate")]
    EmptyMask,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),
}
