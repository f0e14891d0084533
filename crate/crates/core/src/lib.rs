//! On-the-fly hand-eye calibration from unlabeled 2D keypoints.
//!
//! The pipeline runs once per frame:
//!
//! 1. [`estimators::predict_keypoints`] projects the instrument's labeled keypoints through
//!    forward kinematics and the current hand-eye estimate, attaching the analytic 2×6
//!    measurement Jacobian to each prediction.
//! 2. [`visibility`] prunes predictions on instrument sides that cannot face the camera.
//! 3. [`association::jcbb`] assigns detected pixels to predictions (or to nothing) using
//!    joint compatibility branch and bound.
//! 4. A filter from [`estimators`] (EKF, AEKF or PF) consumes the matched innovations.
//!
//! [`pnp`] provides the initial estimate, [`simulator`] generates synthetic scenes with ground
//! truth, and [`io`] holds the file formats used by the `calib` command-line tool.
//!
//! Units are meters, radians and pixels throughout.

pub mod association;
pub mod camera;
pub mod chi2;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod pnp;
pub mod runner;
pub mod simulator;
pub mod visibility;

pub use error::{Error, Result};

/// 6-vector of calibration parameters `[alpha, beta, gamma, tx, ty, tz]`.
pub type Vec6 = nalgebra::SVector<f64, 6>;
/// 6×6 covariance over the calibration parameters.
pub type Mat6 = nalgebra::SMatrix<f64, 6, 6>;
