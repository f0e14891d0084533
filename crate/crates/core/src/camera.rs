//! Pinhole projection and the analytic measurement Jacobian.
//!
//! A keypoint at `p_r` in the robot base frame reaches the camera through the initial hand-eye
//! transform `T_init = (R_init, t_init)` and the correction `T(x)`:
//!
//! ```text
//! p_c = R_init (R(x) p_r + t(x)) + t_init
//! ```
//!
//! The 2×6 Jacobian of the pixel w.r.t. `x` is `H = H_obs · H_c`, with `H_c` the 3×6 Jacobian
//! of `p_c` and `H_obs` the 2×3 Jacobian of the projection.

use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{rot_x, rot_y, rot_z, state_to_transform, Transform};
use crate::{Error, Result, Vec6};

/// Default minimum depth in front of the camera.
pub const DEFAULT_Z_MIN: f64 = 1e-6;

pub type Mat3x6 = SMatrix<f64, 3, 6>;
pub type Mat2x6 = SMatrix<f64, 2, 6>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }
}

/// `∂pixel/∂x`, 2×6.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementJacobian {
    pub h: Mat2x6,
}

/// Camera-frame position of a base-frame point.
pub fn chain_point(t_init: &Transform, x: &Vec6, p_r: &Vector3<f64>) -> Vector3<f64> {
    let t = state_to_transform(x);
    t_init.rotation * (t.rotation * p_r) + t_init.rotation * t.translation + t_init.translation
}

pub fn project(k: &CameraIntrinsics, p_c: &Vector3<f64>) -> Result<PixelPoint> {
    project_with_min(k, p_c, DEFAULT_Z_MIN)
}

pub fn project_with_min(k: &CameraIntrinsics, p_c: &Vector3<f64>, z_min: f64) -> Result<PixelPoint> {
    if !(p_c.z > z_min) {
        return Err(Error::BehindCamera { z: p_c.z });
    }
    Ok(PixelPoint::new(k.fx * p_c.x / p_c.z + k.cx, k.fy * p_c.y / p_c.z + k.cy))
}

/// 3×6 Jacobian of [`chain_point`] w.r.t. the calibration state.
pub fn jacobian_state(t_init: &Transform, x: &Vec6, p_r: &Vector3<f64>) -> Mat3x6 {
    let (alpha, beta, gamma) = (x[0], x[1], x[2]);
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    let r_init = t_init.rotation;
    let rz = rot_z(alpha);
    let ry = rot_y(beta);
    let rx = rot_x(gamma);

    // d/d(alpha): R_init · dR_z/dalpha · (R_y R_x p).
    let b = ry * rx * p_r;
    let c_alpha = Vector3::new(-b.x * sa - b.y * ca, b.x * ca - b.y * sa, 0.0);
    // d/d(beta): R_init R_z · dR_y/dbeta · (R_x p).
    let b = rx * p_r;
    let c_beta = Vector3::new(-b.x * sb + b.z * cb, 0.0, -b.x * cb - b.z * sb);
    // d/d(gamma): R_init R_z R_y · dR_x/dgamma · p.
    let b = p_r;
    let c_gamma = Vector3::new(0.0, -b.y * sg - b.z * cg, b.y * cg - b.z * sg);

    let mut h = Mat3x6::zeros();
    h.set_column(0, &(r_init * c_alpha));
    h.set_column(1, &(r_init * rz * c_beta));
    h.set_column(2, &(r_init * rz * ry * c_gamma));
    h.fixed_view_mut::<3, 3>(0, 3).copy_from(&r_init);
    h
}

/// 2×3 Jacobian of [`project`] w.r.t. the camera-frame point.
pub fn jacobian_projection(k: &CameraIntrinsics, p_c: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    jacobian_projection_with_min(k, p_c, DEFAULT_Z_MIN)
}

pub fn jacobian_projection_with_min(
    k: &CameraIntrinsics,
    p_c: &Vector3<f64>,
    z_min: f64,
) -> Result<Matrix2x3<f64>> {
    if !(p_c.z > z_min) {
        return Err(Error::BehindCamera { z: p_c.z });
    }
    let iz = 1.0 / p_c.z;
    let iz2 = iz * iz;
    Ok(Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p_c.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p_c.y * iz2,
    ))
}

pub fn measurement_jacobian(
    t_init: &Transform,
    x: &Vec6,
    p_r: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<MeasurementJacobian> {
    let p_c = chain_point(t_init, x, p_r);
    let h_obs = jacobian_projection(k, &p_c)?;
    Ok(MeasurementJacobian { h: h_obs * jacobian_state(t_init, x, p_r) })
}

/// Predicted pixel and Jacobian in one pass.
pub fn predict_pixel(
    t_init: &Transform,
    x: &Vec6,
    p_r: &Vector3<f64>,
    k: &CameraIntrinsics,
    z_min: f64,
) -> Result<(PixelPoint, MeasurementJacobian)> {
    let p_c = chain_point(t_init, x, p_r);
    let pixel = project_with_min(k, &p_c, z_min)?;
    let h_obs = jacobian_projection_with_min(k, &p_c, z_min)?;
    Ok((pixel, MeasurementJacobian { h: h_obs * jacobian_state(t_init, x, p_r) }))
}
