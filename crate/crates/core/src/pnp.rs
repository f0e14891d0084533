//! Perspective-n-point pose estimation for initializing the hand-eye state.
//!
//! The pose maps robot-base points into the camera frame. Refinement is Gauss–Newton on the
//! local parameterization `pose ∘ T(δ)`, whose Jacobian is the measurement Jacobian at `x = 0`
//! with `pose` in place of `T_init`. Starting points come from a normalized DLT (when the
//! points are not coplanar) and a fixed set of rotation seeds.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{measurement_jacobian, project_with_min, CameraIntrinsics, PixelPoint, DEFAULT_Z_MIN};
use crate::geometry::{rot_x, rot_y, rot_z, state_to_transform, transform_to_state, Transform};
use crate::{Error, Mat6, Result, Vec6};

pub const MIN_REFINE_POINTS: usize = 4;
pub const MIN_SAMPLE: usize = 6;

const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 20;
const MAX_FAILED_STEPS: usize = 5;
const STEP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p_r: Vector3<f64>,
    pub pixel: PixelPoint,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    /// Camera ← base.
    pub pose: Transform,
    pub inliers: Vec<bool>,
    /// Mean reprojection error over inliers, in pixels.
    pub mean_error: f64,
    pub iterations: usize,
}

impl PnpResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn reprojection_error(pose: &Transform, c: &Correspondence, k: &CameraIntrinsics) -> f64 {
    match project_with_min(k, &pose.apply(&c.p_r), DEFAULT_Z_MIN) {
        Ok(px) => (px.u - c.pixel.u).hypot(px.v - c.pixel.v),
        Err(_) => f64::INFINITY,
    }
}

fn sum_squared_error(pose: &Transform, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    corrs.iter().map(|c| reprojection_error(pose, c, k).powi(2)).sum()
}

fn mean_error(pose: &Transform, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    if corrs.is_empty() {
        return 0.0;
    }
    corrs.iter().map(|c| reprojection_error(pose, c, k)).sum::<f64>() / corrs.len() as f64
}

/// Gauss–Newton refinement from `initial` with step halving. Every point counts as an inlier.
pub fn pnp_refine(corrs: &[Correspondence], initial: &Transform, k: &CameraIntrinsics) -> Result<PnpResult> {
    if corrs.len() < MIN_REFINE_POINTS {
        return Err(Error::NotEnoughCorrespondences { need: MIN_REFINE_POINTS, got: corrs.len() });
    }
    let mut pose = initial.orthonormalized();
    let mut cost = sum_squared_error(&pose, corrs, k);
    if !cost.is_finite() {
        return Err(Error::Diverged { iterations: 0 });
    }
    let mut failed = 0;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Mat6::zeros();
        let mut jtr = Vec6::zeros();
        for c in corrs {
            let p_c = pose.apply(&c.p_r);
            let px = project_with_min(k, &p_c, DEFAULT_Z_MIN)?;
            let h = measurement_jacobian(&pose, &Vec6::zeros(), &c.p_r, k)?.h;
            let r = c.pixel.to_vector() - px.to_vector();
            jtj += h.transpose() * h;
            jtr += h.transpose() * r;
        }
        // A tiny damping keeps rank-deficient (e.g. coplanar) problems solvable; it grows after
        // each failed line search.
        let damping = (1e-12 * 100f64.powi(failed as i32)) * jtj.trace().max(1e-300);
        let Some(step) = (jtj + Mat6::identity() * damping).cholesky().map(|ch| ch.solve(&jtr)) else {
            break;
        };
        if step.norm() < STEP_TOL {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = pose.compose(&state_to_transform(&(step * scale))).orthonormalized();
            let c = sum_squared_error(&candidate, corrs, k);
            if c <= cost {
                accepted = Some((candidate, c));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((p, c)) => {
                let improvement = cost - c;
                pose = p;
                cost = c;
                failed = 0;
                if (step * scale).norm() < STEP_TOL || improvement <= 1e-15 * cost.max(1e-300) {
                    break;
                }
            }
            None => {
                failed += 1;
                if failed >= MAX_FAILED_STEPS {
                    // Only a residual this small can stall the search at a true minimum.
                    if cost.sqrt() < 1e-6 * corrs.len() as f64 {
                        break;
                    }
                    return Err(Error::Diverged { iterations });
                }
            }
        }
    }
    Ok(PnpResult { pose, inliers: vec![true; corrs.len()], mean_error: mean_error(&pose, corrs, k), iterations })
}

/// Pose from the normalized direct linear transform; `None` for degenerate (e.g. coplanar)
/// configurations.
pub fn dlt_pose(corrs: &[Correspondence], k: &CameraIntrinsics) -> Option<Transform> {
    if corrs.len() < MIN_SAMPLE {
        return None;
    }
    let n = corrs.len() as f64;
    let centroid = corrs.iter().fold(Vector3::zeros(), |a, c| a + c.p_r) / n;
    let scale = (corrs.iter().map(|c| (c.p_r - centroid).norm_squared()).sum::<f64>() / n).sqrt();
    if !(scale > 0.0) {
        return None;
    }
    let rows = 2 * corrs.len().max(6);
    let mut a = DMatrix::<f64>::zeros(rows, 12);
    for (i, c) in corrs.iter().enumerate() {
        let x = (c.p_r - centroid) / scale;
        let u = (c.pixel.u - k.cx) / k.fx;
        let v = (c.pixel.v - k.cy) / k.fy;
        let xh = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -v * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, smin) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let smax = svd.singular_values.max();
    // A second near-zero singular value means the solution is not unique.
    let second = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imin)
        .map(|(_, s)| *s)
        .fold(f64::INFINITY, f64::min);
    if second < 1e-9 * smax || !(*smin < second) {
        return None;
    }
    let p = v_t.row(imin);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut col = Vector3::new(p[3], p[7], p[11]);
    if m.determinant() < 0.0 {
        m = -m;
        col = -col;
    }
    let det = m.determinant();
    if !(det > 0.0) {
        return None;
    }
    let lambda = det.cbrt();
    let r = Transform::new(m / lambda, Vector3::zeros()).orthonormalized().rotation;
    // m = λ·s·R and col = λ·(R c + t), with λ absorbing the homogeneous scale.
    let lambda_t = lambda / scale;
    let t = col / lambda_t - r * centroid;
    Some(Transform::new(r, t))
}

fn rotation_seeds() -> [Matrix3<f64>; 9] {
    use std::f64::consts::{FRAC_PI_2, PI};
    [
        Matrix3::identity(),
        rot_x(FRAC_PI_2),
        rot_x(-FRAC_PI_2),
        rot_x(PI),
        rot_y(FRAC_PI_2),
        rot_y(-FRAC_PI_2),
        rot_y(PI),
        rot_z(PI),
        rot_x(PI) * rot_z(FRAC_PI_2),
    ]
}

/// Translation placing the rotated points' centroid on the ray through the pixel centroid, at
/// the depth where the 3D and 2D spreads agree.
fn translation_seed(r: &Matrix3<f64>, corrs: &[Correspondence], k: &CameraIntrinsics) -> Vector3<f64> {
    let n = corrs.len() as f64;
    let c3 = corrs.iter().fold(Vector3::zeros(), |a, c| a + r * c.p_r) / n;
    let (cu, cv) = corrs.iter().fold((0.0, 0.0), |a, c| (a.0 + c.pixel.u, a.1 + c.pixel.v));
    let (cu, cv) = (cu / n, cv / n);
    let spread3 = (corrs.iter().map(|c| (r * c.p_r - c3).norm_squared()).sum::<f64>() / n).sqrt();
    let spread2 = (corrs.iter().map(|c| (c.pixel.u - cu).powi(2) + (c.pixel.v - cv).powi(2)).sum::<f64>() / n).sqrt();
    let z0 = if spread2 > 1e-9 { 0.5 * (k.fx + k.fy) * spread3 / spread2 } else { 1.0 };
    let ray = Vector3::new((cu - k.cx) / k.fx, (cv - k.cy) / k.fy, 1.0);
    ray * z0 - c3
}

/// Best refinement over the DLT seed and the fixed rotation seeds.
pub fn pnp_multistart(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<PnpResult> {
    multistart(corrs, k, 1e-6)
}

/// As [`pnp_multistart`], skipping the rotation seeds once the DLT start reaches `good_enough`
/// mean reprojection error.
fn multistart(corrs: &[Correspondence], k: &CameraIntrinsics, good_enough: f64) -> Result<PnpResult> {
    if corrs.len() < MIN_REFINE_POINTS {
        return Err(Error::NotEnoughCorrespondences { need: MIN_REFINE_POINTS, got: corrs.len() });
    }
    fn consider(best: &mut Option<PnpResult>, r: Result<PnpResult>) {
        if let Ok(r) = r {
            if best.as_ref().is_none_or(|b| r.mean_error < b.mean_error) {
                *best = Some(r);
            }
        }
    }
    let mut best: Option<PnpResult> = None;
    if let Some(seed) = dlt_pose(corrs, k) {
        consider(&mut best, pnp_refine(corrs, &seed, k));
    }
    if best.as_ref().is_some_and(|b| b.mean_error < good_enough) {
        return Ok(best.unwrap());
    }
    for r in rotation_seeds() {
        let seed = Transform::new(r, translation_seed(&r, corrs, k));
        consider(&mut best, pnp_refine(corrs, &seed, k));
    }
    best.ok_or(Error::Diverged { iterations: MAX_ITERATIONS })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RansacOptions {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self { iterations: 500, inlier_threshold_px: 3.0, seed: 0 }
    }
}

/// RANSAC over minimal samples of six correspondences, followed by refinement on the inliers.
pub fn pnp_ransac(corrs: &[Correspondence], k: &CameraIntrinsics, options: &RansacOptions) -> Result<PnpResult> {
    if corrs.len() < MIN_SAMPLE {
        return Err(Error::NotEnoughCorrespondences { need: MIN_SAMPLE, got: corrs.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let inliers_of = |pose: &Transform| -> (Vec<bool>, f64) {
        let errs: Vec<f64> = corrs.iter().map(|c| reprojection_error(pose, c, k)).collect();
        let mask: Vec<bool> = errs.iter().map(|&e| e < options.inlier_threshold_px).collect();
        let sum: f64 = errs.iter().zip(&mask).filter(|(_, &m)| m).map(|(e, _)| e).sum();
        (mask, sum)
    };
    let mut best: Option<(Transform, usize, f64)> = None;
    let mut needed = options.iterations;
    let mut trial = 0;
    while trial < needed.min(options.iterations) {
        trial += 1;
        let idx = sample(&mut rng, corrs.len(), MIN_SAMPLE);
        let subset: Vec<Correspondence> = idx.iter().map(|i| corrs[i]).collect();
        let Ok(fit) = multistart(&subset, k, options.inlier_threshold_px / 3.0) else { continue };
        let (mask, err_sum) = inliers_of(&fit.pose);
        let count = mask.iter().filter(|&&b| b).count();
        let better = best.as_ref().is_none_or(|&(_, n, e)| count > n || (count == n && err_sum < e));
        if better {
            best = Some((fit.pose, count, err_sum));
            needed = trials_for_confidence(count as f64 / corrs.len() as f64);
        }
    }
    let (pose, count, _) = best.ok_or(Error::RansacFailed(MIN_SAMPLE))?;
    if count < MIN_SAMPLE {
        return Err(Error::RansacFailed(MIN_SAMPLE));
    }
    let (mask, _) = inliers_of(&pose);
    let inlier_set: Vec<Correspondence> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    let refined = pnp_refine(&inlier_set, &pose, k).unwrap_or(PnpResult {
        pose,
        inliers: vec![true; inlier_set.len()],
        mean_error: mean_error(&pose, &inlier_set, k),
        iterations: 0,
    });
    let (mask, _) = inliers_of(&refined.pose);
    let final_set: Vec<Correspondence> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    if final_set.len() < MIN_SAMPLE {
        return Err(Error::RansacFailed(MIN_SAMPLE));
    }
    Ok(PnpResult {
        mean_error: mean_error(&refined.pose, &final_set, k),
        pose: refined.pose,
        inliers: mask,
        iterations: refined.iterations,
    })
}

/// Trials after which an all-inlier minimal sample has been drawn with 99.9% probability.
fn trials_for_confidence(inlier_ratio: f64) -> usize {
    let p_good = inlier_ratio.powi(MIN_SAMPLE as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    ((1.0 - 0.999f64).ln() / (1.0 - p_good).ln()).ceil().max(1.0) as usize
}

/// Calibration state whose chained transform `T_init ∘ T(x)` equals `pose`. The flag reports
/// gimbal lock in the decomposition.
pub fn pose_to_state(pose: &Transform, t_init: &Transform) -> (Vec6, bool) {
    transform_to_state(&t_init.inverse().compose(pose))
}

/// The incremental PnP baseline: every frame's correspondences join a growing pool that is
/// re-solved from scratch, so each result depends only on the pool and the seed.
#[derive(Debug, Clone, Default)]
pub struct IncrementalPnp {
    pool: Vec<Correspondence>,
    options: RansacOptions,
}

impl IncrementalPnp {
    pub fn new(options: RansacOptions) -> Self {
        Self { pool: Vec::new(), options }
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn add_frame(&mut self, corrs: &[Correspondence]) {
        self.pool.extend_from_slice(corrs);
    }

    pub fn solve(&self, k: &CameraIntrinsics) -> Result<PnpResult> {
        pnp_ransac(&self.pool, k, &self.options)
    }
}
