//! Rigid transforms, Z-Y-X Euler angles, DH forward kinematics and the instrument model.
//!
//! The calibration state `x = [alpha, beta, gamma, tx, ty, tz]` parameterizes the correction
//! transform between the robot base frame `r` and the corrected base frame `r'`, with
//! `R = R_z(alpha) R_y(beta) R_x(gamma)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Mat6, Result, Vec6};

/// Below this value of `|cos(beta)|` the Z-Y-X decomposition is treated as gimbal locked.
pub const GIMBAL_LOCK_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerZYX {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerZYX {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.alpha, self.beta, self.gamma)
    }

    /// Wraps alpha and gamma into (-pi, pi]; beta is left as is.
    pub fn normalized(&self) -> Self {
        Self::new(wrap_angle(self.alpha), self.beta, wrap_angle(self.gamma))
    }
}

/// Result of [`rotation_to_euler`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerZYX,
    /// Set when `|cos(beta)| < GIMBAL_LOCK_EPS`. Gamma is then fixed to zero and alpha absorbs
    /// the residual rotation about the (aligned) z/x axes.
    pub gimbal_lock: bool,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Closed-form `R_z(alpha) R_y(beta) R_x(gamma)`.
pub fn euler_to_rotation(e: &EulerZYX) -> Matrix3<f64> {
    let (sa, ca) = e.alpha.sin_cos();
    let (sb, cb) = e.beta.sin_cos();
    let (sg, cg) = e.gamma.sin_cos();
    Matrix3::new(
        ca * cb,
        ca * sb * sg - sa * cg,
        ca * sb * cg + sa * sg,
        sa * cb,
        sa * sb * sg + ca * cg,
        sa * sb * cg - ca * sg,
        -sb,
        cb * sg,
        cb * cg,
    )
}

pub fn rotation_to_euler(r: &Matrix3<f64>) -> EulerDecomposition {
    let cb = r[(0, 0)].hypot(r[(1, 0)]);
    let beta = (-r[(2, 0)]).atan2(cb);
    if cb < GIMBAL_LOCK_EPS {
        // R01 = -sin(alpha -/+ gamma), R11 = cos(alpha -/+ gamma) at beta = +/- pi/2.
        let alpha = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return EulerDecomposition {
            angles: EulerZYX::new(alpha, beta, 0.0),
            gimbal_lock: true,
        };
    }
    EulerDecomposition {
        angles: EulerZYX::new(r[(1, 0)].atan2(r[(0, 0)]), beta, r[(2, 1)].atan2(r[(2, 2)])),
        gimbal_lock: false,
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform::new(rt, -(rt * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Transform {
        Transform::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Re-orthonormalizes the rotation through its polar decomposition.
    pub fn orthonormalized(&self) -> Transform {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Transform::new(r, self.translation)
    }

    /// Max deviation of `RᵀR` from identity plus the deviation of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        e.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Builds `T(x)` with rotation `R_z R_y R_x` from `x[0..3]` and translation `x[3..6]`.
pub fn state_to_transform(x: &Vec6) -> Transform {
    Transform::new(
        euler_to_rotation(&EulerZYX::new(x[0], x[1], x[2])),
        Vector3::new(x[3], x[4], x[5]),
    )
}

/// Inverse of [`state_to_transform`] away from gimbal lock.
pub fn transform_to_state(t: &Transform) -> (Vec6, bool) {
    let d = rotation_to_euler(&t.rotation);
    let e = d.angles;
    (
        Vec6::new(e.alpha, e.beta, e.gamma, t.translation.x, t.translation.y, t.translation.z),
        d.gimbal_lock,
    )
}

/// State estimate with covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationState {
    pub x: Vec6,
    pub sigma_x: Mat6,
}

impl CalibrationState {
    pub fn new(x: Vec6, sigma_x: Mat6) -> Self {
        Self { x, sigma_x }
    }

    pub fn transform(&self) -> Transform {
        state_to_transform(&self.x)
    }

    /// Symmetrizes the covariance and clips eigenvalues below `floor`.
    pub fn regularize(&mut self, floor: f64) {
        self.sigma_x = symmetrize_psd(&self.sigma_x, floor);
    }
}

pub(crate) fn symmetrize_psd(m: &Mat6, floor: f64) -> Mat6 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let r = eig.eigenvectors * Mat6::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (r + r.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

/// One row of a classic (distal) Denavit–Hartenberg table:
/// `T = R_z(theta) T_z(d) T_x(a) R_x(alpha)`.
///
/// The joint variable is added to `theta_offset` for revolute joints and to `d` for prismatic
/// joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
    pub joint: JointType,
}

impl DhRow {
    pub fn local_transform(&self, q: f64) -> Transform {
        let (theta, d) = match self.joint {
            JointType::Revolute => (self.theta_offset + q, self.d),
            JointType::Prismatic => (self.theta_offset, self.d + q),
        };
        let rz = rot_z(theta);
        let rx = rot_x(self.alpha);
        // R_z T_z T_x R_x: translation is d along z then a along the rotated x axis.
        let translation = Vector3::new(0.0, 0.0, d) + rz * Vector3::new(self.a, 0.0, 0.0);
        Transform::new(rz * rx, translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DhChain {
    rows: Vec<DhRow>,
}

impl DhChain {
    pub fn new(rows: Vec<DhRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidModel("DH chain has no joints".into()));
        }
        let finite = rows
            .iter()
            .all(|r| r.a.is_finite() && r.alpha.is_finite() && r.d.is_finite() && r.theta_offset.is_finite());
        if !finite {
            return Err(Error::InvalidModel("DH parameters must be finite".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[DhRow] {
        &self.rows
    }

    pub fn joint_count(&self) -> usize {
        self.rows.len()
    }
}

/// Base-to-frame transforms for every joint frame: entry `k` is the product of rows `0..=k`.
pub fn forward_kinematics(chain: &DhChain, q: &[f64]) -> Result<Vec<Transform>> {
    if q.len() != chain.joint_count() {
        return Err(Error::DimensionMismatch { expected: chain.joint_count(), got: q.len() });
    }
    let mut out = Vec::with_capacity(q.len());
    let mut acc = Transform::identity();
    for (row, &qi) in chain.rows.iter().zip(q) {
        acc = acc.compose(&row.local_transform(qi));
        out.push(acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Roll,
    Pitch,
    End,
    Grip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Front,
    Back,
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Front, Side::Back, Side::Left, Side::Right];

    pub fn opposite(self) -> Side {
        match self {
            Side::Front => Side::Back,
            Side::Back => Side::Front,
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    fn code(self) -> char {
        match self {
            Side::Front => 'f',
            Side::Back => 'b',
            Side::Left => 'l',
            Side::Right => 'r',
        }
    }
}

/// Keypoint label, e.g. `rf` (roll family, front side). Orders as roll < pitch < end < grip,
/// then front < back < left < right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    family: Family,
    side: Side,
}

impl Label {
    pub fn new(family: Family, side: Side) -> Result<Self> {
        let ok = match family {
            Family::Roll | Family::Pitch => true,
            Family::End => matches!(side, Side::Front | Side::Back),
            Family::Grip => matches!(side, Side::Left | Side::Right),
        };
        if ok {
            Ok(Self { family, side })
        } else {
            Err(Error::UnknownLabel(format!("{family:?}/{side:?}")))
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// The twelve labels of the standard layout in canonical order.
    pub fn standard_set() -> Vec<Label> {
        let mut v = Vec::with_capacity(12);
        for f in [Family::Roll, Family::Pitch] {
            for s in Side::ALL {
                v.push(Label { family: f, side: s });
            }
        }
        v.push(Label { family: Family::End, side: Side::Front });
        v.push(Label { family: Family::End, side: Side::Back });
        v.push(Label { family: Family::Grip, side: Side::Left });
        v.push(Label { family: Family::Grip, side: Side::Right });
        v
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = match self.family {
            Family::Roll => 'r',
            Family::Pitch => 'p',
            Family::End => 'e',
            Family::Grip => 'g',
        };
        write!(f, "{fam}{}", self.side.code())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        let (Some(fc), Some(sc), None) = (chars.next(), chars.next(), chars.next()) else {
            return Err(Error::UnknownLabel(s.to_string()));
        };
        let family = match fc {
            'r' => Family::Roll,
            'p' => Family::Pitch,
            'e' => Family::End,
            'g' => Family::Grip,
            _ => return Err(Error::UnknownLabel(s.to_string())),
        };
        let side = match sc {
            'f' => Side::Front,
            'b' => Side::Back,
            'l' => Side::Left,
            'r' => Side::Right,
            _ => return Err(Error::UnknownLabel(s.to_string())),
        };
        Label::new(family, side).map_err(|_| Error::UnknownLabel(s.to_string()))
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyPoint {
    pub label: Label,
    pub joint_index: usize,
    pub local_position: Vector3<f64>,
    /// Outward surface normal in the joint frame. Only the simulator uses it, to decide which
    /// keypoints a camera can actually see.
    pub normal: Option<Vector3<f64>>,
}

/// A cylindrical link whose axis runs from the origin of `start_joint`'s frame to the origin of
/// `end_joint`'s frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_joint: usize,
    pub end_joint: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentModel {
    pub chain: DhChain,
    pub keypoints: Vec<KeyPoint>,
    pub roll_segment: Segment,
    pub pitch_segment: Segment,
}

impl InstrumentModel {
    pub fn new(
        chain: DhChain,
        keypoints: Vec<KeyPoint>,
        roll_segment: Segment,
        pitch_segment: Segment,
    ) -> Result<Self> {
        let n = chain.joint_count();
        for seg in [&roll_segment, &pitch_segment] {
            if !(seg.radius > 0.0) {
                return Err(Error::InvalidModel("segment radius must be positive".into()));
            }
            if seg.start_joint >= n || seg.end_joint >= n || seg.start_joint == seg.end_joint {
                return Err(Error::InvalidModel(format!(
                    "segment joints ({}, {}) invalid for a {n}-joint chain",
                    seg.start_joint, seg.end_joint
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for kp in &keypoints {
            if kp.joint_index >= n {
                return Err(Error::InvalidModel(format!(
                    "keypoint {} references joint {} of a {n}-joint chain",
                    kp.label, kp.joint_index
                )));
            }
            if !seen.insert(kp.label) {
                return Err(Error::InvalidModel(format!("duplicate keypoint label {}", kp.label)));
            }
        }
        Ok(Self { chain, keypoints, roll_segment, pitch_segment })
    }

    pub fn keypoint(&self, label: Label) -> Option<&KeyPoint> {
        self.keypoints.iter().find(|k| k.label == label)
    }

    /// Illustrative 6-joint large-needle-driver surrogate: outer yaw, outer pitch, insertion
    /// (prismatic), shaft roll, wrist pitch, wrist yaw. The base frame sits at the remote center
    /// of motion with the shaft pointing along -z at zero joint angles. Dimensions are plausible
    /// for an 8 mm instrument but are not manufacturer data.
    pub fn surrogate_lnd() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let rev = |a, alpha, d, theta_offset| DhRow { a, alpha, d, theta_offset, joint: JointType::Revolute };
        let rows = vec![
            rev(0.0, -FRAC_PI_2, 0.0, 0.0),
            rev(0.0, -FRAC_PI_2, 0.0, 0.0),
            DhRow { a: 0.0, alpha: 0.0, d: 0.0, theta_offset: 0.0, joint: JointType::Prismatic },
            rev(0.0, -FRAC_PI_2, 0.012, 0.0),
            rev(0.0091, -FRAC_PI_2, 0.0, -FRAC_PI_2),
            rev(0.0, 0.0, 0.0, 0.0),
        ];
        let chain = DhChain::new(rows).expect("surrogate chain is valid");
        // Frame 3 (after roll): x = front, z = left, -y = toward the tip.
        // Frame 4 (after wrist pitch): x = toward the tip, y = right, z = front.
        // Frame 5 (after wrist yaw): frame 4 rotated about its z axis.
        let (r_roll, s_roll) = (0.0042, 0.004);
        let (r_pitch, s_pitch) = (0.0035, 0.0045);
        let kp = |label: &str, joint_index, p: [f64; 3], n: [f64; 3]| KeyPoint {
            label: label.parse().unwrap(),
            joint_index,
            local_position: Vector3::from(p),
            normal: Some(Vector3::from(n)),
        };
        let keypoints = vec![
            kp("rf", 3, [r_roll, s_roll, 0.0], [1.0, 0.0, 0.0]),
            kp("rb", 3, [-r_roll, s_roll, 0.0], [-1.0, 0.0, 0.0]),
            kp("rl", 3, [0.0, s_roll, r_roll], [0.0, 0.0, 1.0]),
            kp("rr", 3, [0.0, s_roll, -r_roll], [0.0, 0.0, -1.0]),
            kp("pf", 4, [-s_pitch, 0.0, r_pitch], [0.0, 0.0, 1.0]),
            kp("pb", 4, [-s_pitch, 0.0, -r_pitch], [0.0, 0.0, -1.0]),
            kp("pl", 4, [-s_pitch, -r_pitch, 0.0], [0.0, -1.0, 0.0]),
            kp("pr", 4, [-s_pitch, r_pitch, 0.0], [0.0, 1.0, 0.0]),
            kp("ef", 5, [0.004, 0.0, 0.0025], [0.0, 0.0, 1.0]),
            kp("eb", 5, [0.004, 0.0, -0.0025], [0.0, 0.0, -1.0]),
            kp("gl", 5, [0.010, -0.0015, 0.0], [0.0, -1.0, 0.0]),
            kp("gr", 5, [0.010, 0.0015, 0.0], [0.0, 1.0, 0.0]),
        ];
        InstrumentModel::new(
            chain,
            keypoints,
            Segment { start_joint: 2, end_joint: 3, radius: r_roll },
            Segment { start_joint: 3, end_joint: 4, radius: r_pitch },
        )
        .expect("surrogate model is valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(ModelFile::from(self)).expect("model serializes")
    }
}

/// Base-frame position of a labeled keypoint.
pub fn keypoint_in_base(model: &InstrumentModel, q: &[f64], label: Label) -> Result<Vector3<f64>> {
    let kp = model.keypoint(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
    let frames = forward_kinematics(&model.chain, q)?;
    Ok(frames[kp.joint_index].apply(&kp.local_position))
}

/// Base-frame positions of every keypoint, in model order, from precomputed joint frames.
pub fn keypoints_in_base(model: &InstrumentModel, frames: &[Transform]) -> Vec<Vector3<f64>> {
    model.keypoints.iter().map(|k| frames[k.joint_index].apply(&k.local_position)).collect()
}

// JSON document layout: {"convention": "classic_dh", "dh": [...], "keypoints": [...], "segments": {...}}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    #[serde(default = "default_convention")]
    convention: String,
    dh: Vec<DhRow>,
    keypoints: Vec<KeyPointFile>,
    segments: SegmentsFile,
}

fn default_convention() -> String {
    "classic_dh".to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyPointFile {
    label: Label,
    joint: usize,
    position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normal: Option<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentsFile {
    roll: Segment,
    pitch: Segment,
}

impl TryFrom<ModelFile> for InstrumentModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.convention != "classic_dh" {
            return Err(Error::InvalidModel(format!(
                "unsupported DH convention `{}` (expected classic_dh)",
                f.convention
            )));
        }
        let chain = DhChain::new(f.dh)?;
        let keypoints = f
            .keypoints
            .into_iter()
            .map(|k| KeyPoint {
                label: k.label,
                joint_index: k.joint,
                local_position: Vector3::from(k.position),
                normal: k.normal.map(Vector3::from),
            })
            .collect();
        InstrumentModel::new(chain, keypoints, f.segments.roll, f.segments.pitch)
    }
}

impl From<&InstrumentModel> for ModelFile {
    fn from(m: &InstrumentModel) -> Self {
        ModelFile {
            convention: default_convention(),
            dh: m.chain.rows.clone(),
            keypoints: m
                .keypoints
                .iter()
                .map(|k| KeyPointFile {
                    label: k.label,
                    joint: k.joint_index,
                    position: k.local_position.into(),
                    normal: k.normal.map(Into::into),
                })
                .collect(),
            segments: SegmentsFile { roll: m.roll_segment, pitch: m.pitch_segment },
        }
    }
}
