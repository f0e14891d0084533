use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown keypoint label `{0}`")]
    UnknownLabel(String),

    #[error("point is behind the camera (z = {z:.3e} m)")]
    BehindCamera { z: f64 },

    #[error("cylinder axis projects to a degenerate image segment")]
    DegenerateAxis,

    #[error("camera center lies inside the cylinder")]
    InsideCylinder,

    #[error("invalid instrument model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("chi-square quantile domain error: dof = {dof}, alpha = {alpha}")]
    ChiSquareDomain { dof: usize, alpha: f64 },

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(&'static str),

    #[error("not enough correspondences: need {need}, got {got}")]
    NotEnoughCorrespondences { need: usize, got: usize },

    #[error("pose refinement diverged after {iterations} iterations")]
    Diverged { iterations: usize },

    #[error("ransac found no model with at least {0} inliers")]
    RansacFailed(usize),

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
