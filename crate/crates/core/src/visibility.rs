//! Side visibility check for the roll and pitch cylinders.
//!
//! Each cylinder is projected analytically: the center line is the image of the plane through
//! the camera center and the axis, and the two silhouette edges are the images of the planes
//! through the camera center tangent to the cylinder. Keypoints on the side facing the camera
//! project near the center line; keypoints on the sides at the silhouette project near an edge.
//! The center-edge ratios tell which pair of sides is at the silhouette, and which side of the
//! center line the keypoints fall on tells which of the remaining sides faces the camera.
//!
//! Around the tip-ward axis the sides are ordered front → left → back → right (right-handed).
//! With the image "up" normal `(-d_v, d_u)` of the projected axis direction `d`, a visible front
//! puts the left keypoints up, and a visible right puts the front keypoints up.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::Serialize;

use crate::association::Prediction;
use crate::camera::{chain_point, project_with_min, CameraIntrinsics, PixelPoint, DEFAULT_Z_MIN};
use crate::geometry::{Family, InstrumentModel, Segment, Side, Transform};
use crate::{Error, Result, Vec6};

/// Default ratio threshold above which one side is considered dominant.
pub const DEFAULT_GAMMA: f64 = 100.0;

const RATIO_EPS: f64 = 1e-9;
const MIN_AXIS_PX: f64 = 1.0;

/// Image line `a·u + b·v + c = 0` with `a² + b² = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Line2D {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Line2D {
    pub fn new(a: f64, b: f64, c: f64) -> Option<Self> {
        let n = a.hypot(b);
        (n > 0.0 && n.is_finite()).then(|| Self { a: a / n, b: b / n, c: c / n })
    }

    pub fn through(p: &PixelPoint, q: &PixelPoint) -> Option<Self> {
        let (du, dv) = (q.u - p.u, q.v - p.v);
        Self::new(-dv, du, dv * p.u - du * p.v)
    }

    pub fn signed_distance(&self, p: &PixelPoint) -> f64 {
        self.a * p.u + self.b * p.v + self.c
    }

    pub fn distance(&self, p: &PixelPoint) -> f64 {
        self.signed_distance(p).abs()
    }

    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(self.a, self.b)
    }

    fn flipped(self) -> Self {
        Self { a: -self.a, b: -self.b, c: -self.c }
    }

    /// Image of the plane through the camera center with normal `n` (camera coordinates).
    fn from_plane_normal(k: &CameraIntrinsics, n: &Vector3<f64>) -> Option<Self> {
        // l = K^-T n
        let k_inv_t = Matrix3::new(
            1.0 / k.fx,
            0.0,
            0.0,
            0.0,
            1.0 / k.fy,
            0.0,
            -k.cx / k.fx,
            -k.cy / k.fy,
            1.0,
        );
        let l = k_inv_t * n;
        Self::new(l.x, l.y, l.z)
    }
}

/// Projected outline of one cylinder. All three lines are oriented so that positive signed
/// distance is the "up" side of the projected axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentSilhouette {
    pub edge_upper: Line2D,
    pub edge_lower: Line2D,
    pub center: Line2D,
    /// Projected axis endpoints (start, end).
    pub axis: [PixelPoint; 2],
}

/// Silhouette of a cylinder given its axis endpoints in camera coordinates.
pub fn silhouette_from_axis(
    k: &CameraIntrinsics,
    start: &Vector3<f64>,
    end: &Vector3<f64>,
    radius: f64,
) -> Result<SegmentSilhouette> {
    let p0 = project_with_min(k, start, DEFAULT_Z_MIN)?;
    let p1 = project_with_min(k, end, DEFAULT_Z_MIN)?;
    if (p1.u - p0.u).hypot(p1.v - p0.v) < MIN_AXIS_PX {
        return Err(Error::DegenerateAxis);
    }
    let axis = (end - start).normalize();
    let w = start - start.dot(&axis) * axis;
    let dist = w.norm();
    if dist <= radius {
        return Err(Error::InsideCylinder);
    }
    let e1 = w / dist;
    let e2 = axis.cross(&e1);
    let (cos_t, sin_t) = (radius / dist, (1.0 - (radius / dist).powi(2)).sqrt());
    let tangent_a = cos_t * e1 + sin_t * e2;
    let tangent_b = cos_t * e1 - sin_t * e2;

    let up_dir = Vector2::new(-(p1.v - p0.v), p1.u - p0.u);
    let orient = |l: Line2D| if l.normal().dot(&up_dir) < 0.0 { l.flipped() } else { l };
    let center = Line2D::through(&p0, &p1).ok_or(Error::DegenerateAxis)?;
    let center = orient(center);
    let ea = orient(Line2D::from_plane_normal(k, &tangent_a).ok_or(Error::DegenerateAxis)?);
    let eb = orient(Line2D::from_plane_normal(k, &tangent_b).ok_or(Error::DegenerateAxis)?);
    let mid = PixelPoint::new(0.5 * (p0.u + p1.u), 0.5 * (p0.v + p1.v));
    // The center lies above the lower edge and below the upper edge.
    let (edge_upper, edge_lower) = if ea.signed_distance(&mid) < eb.signed_distance(&mid) {
        (ea, eb)
    } else {
        (eb, ea)
    };
    Ok(SegmentSilhouette { edge_upper, edge_lower, center, axis: [p0, p1] })
}

/// Silhouette of a model segment at joint frames `frames` (robot base coordinates).
pub fn project_segment_silhouette(
    segment: &Segment,
    frames: &[Transform],
    t_init: &Transform,
    x: &Vec6,
    k: &CameraIntrinsics,
) -> Result<SegmentSilhouette> {
    let start = chain_point(t_init, x, &frames[segment.start_joint].translation);
    let end = chain_point(t_init, x, &frames[segment.end_joint].translation);
    silhouette_from_axis(k, &start, &end, segment.radius)
}

/// Center-edge ratios `(η_fb, η_lr)` from the four projected roll keypoints.
pub fn center_edge_ratios(
    roll: &SegmentSilhouette,
    rf: &PixelPoint,
    rb: &PixelPoint,
    rl: &PixelPoint,
    rr: &PixelPoint,
) -> (f64, f64) {
    let d_c = |p: &PixelPoint| roll.center.distance(p);
    let d_e = |p: &PixelPoint| roll.edge_upper.distance(p).min(roll.edge_lower.distance(p));
    let ratio = |num: f64, den: f64| if den < RATIO_EPS { f64::INFINITY } else { num / den };
    (ratio(d_c(rf) + d_c(rb), d_e(rf) + d_e(rb)), ratio(d_c(rl) + d_c(rr), d_e(rl) + d_e(rr)))
}

/// Numbers of keypoints per side that lie on the up side of their segment's center line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UpCounts {
    pub front: usize,
    pub back: usize,
    pub left: usize,
    pub right: usize,
}

impl UpCounts {
    fn bump(&mut self, side: Side) {
        match side {
            Side::Front => self.front += 1,
            Side::Back => self.back += 1,
            Side::Left => self.left += 1,
            Side::Right => self.right += 1,
        }
    }
}

/// Up counts over roll keypoints (against `roll`) and pitch keypoints (against `pitch`, if
/// available). Other families are ignored.
pub fn up_counts(preds: &[Prediction], roll: &SegmentSilhouette, pitch: Option<&SegmentSilhouette>) -> UpCounts {
    let mut counts = UpCounts::default();
    for p in preds {
        let sil = match p.label.family() {
            Family::Roll => roll,
            Family::Pitch => match pitch {
                Some(s) => s,
                None => continue,
            },
            _ => continue,
        };
        if sil.center.signed_distance(&p.pixel) > 0.0 {
            counts.bump(p.label.side());
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibilityVerdict {
    pub visible_sides: Vec<Side>,
    pub dominant: Option<Side>,
    pub eta_fb: f64,
    pub eta_lr: f64,
}

impl VisibilityVerdict {
    pub fn is_visible(&self, side: Side) -> bool {
        self.visible_sides.contains(&side)
    }
}

/// Decision tree over the center-edge ratios and up counts. Count ties resolve to front and
/// left.
pub fn visible_sides(eta_fb: f64, eta_lr: f64, counts: &UpCounts, gamma: f64) -> VisibilityVerdict {
    let front_or_back = if counts.left >= counts.right { Side::Front } else { Side::Back };
    let left_or_right = if counts.front > counts.back { Side::Right } else { Side::Left };
    let lr_dominant = eta_lr >= gamma;
    let fb_dominant = eta_fb >= gamma;
    let dominant = match (fb_dominant, lr_dominant) {
        // Left/right keypoints sit on the center line: front or back faces the camera.
        (false, true) => Some(front_or_back),
        // Front/back keypoints sit on the center line: left or right faces the camera.
        (true, false) => Some(left_or_right),
        (true, true) => Some(if eta_lr >= eta_fb { front_or_back } else { left_or_right }),
        (false, false) => None,
    };
    let visible_sides = match dominant {
        Some(s) => vec![s],
        None => vec![front_or_back, left_or_right],
    };
    VisibilityVerdict { visible_sides, dominant, eta_fb, eta_lr }
}

/// Keeps predictions whose side is visible.
pub fn prune_predictions(preds: &[Prediction], verdict: &VisibilityVerdict) -> Vec<Prediction> {
    preds.iter().filter(|p| verdict.is_visible(p.label.side())).copied().collect()
}

/// Runs the full check. Returns `None` (no pruning) when the roll silhouette cannot be formed
/// or a roll keypoint prediction is missing.
#[allow(clippy::too_many_arguments)]
pub fn check_visibility(
    model: &InstrumentModel,
    frames: &[Transform],
    t_init: &Transform,
    x: &Vec6,
    k: &CameraIntrinsics,
    preds: &[Prediction],
    gamma: f64,
) -> Option<VisibilityVerdict> {
    let roll = match project_segment_silhouette(&model.roll_segment, frames, t_init, x, k) {
        Ok(s) => s,
        Err(e) => {
            log::debug!("visibility skipped: roll segment {e}");
            return None;
        }
    };
    let pitch = project_segment_silhouette(&model.pitch_segment, frames, t_init, x, k).ok();
    let find = |side: Side| {
        preds.iter().find(|p| p.label.family() == Family::Roll && p.label.side() == side).map(|p| p.pixel)
    };
    let (rf, rb, rl, rr) = (find(Side::Front)?, find(Side::Back)?, find(Side::Left)?, find(Side::Right)?);
    let (eta_fb, eta_lr) = center_edge_ratios(&roll, &rf, &rb, &rl, &rr);
    Some(visible_sides(eta_fb, eta_lr, &up_counts(preds, &roll, pitch.as_ref()), gamma))
}
