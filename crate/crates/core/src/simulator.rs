//! Deterministic synthetic scenes with ground truth.
//!
//! A scene moves the instrument along a joint-space cubic trajectory in front of a fixed
//! camera. Each frame projects the keypoints that face the camera through the true hand-eye
//! transform, adds Gaussian pixel noise, drops some detections, appends uniform outliers and
//! shuffles the result. The generating labels are kept alongside for scoring.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{chain_point, project_with_min, CameraIntrinsics, PixelPoint, DEFAULT_Z_MIN};
use crate::geometry::{forward_kinematics, state_to_transform, InstrumentModel, Label, Transform};
use crate::{Error, Result, Vec6};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceLevel {
    Low,
    Medium,
    High,
}

impl DisturbanceLevel {
    /// Per-component bounds (radians, meters).
    pub fn bounds(self) -> (f64, f64) {
        let (deg, cm) = match self {
            DisturbanceLevel::Low => (1.0, 1.0),
            DisturbanceLevel::Medium => (3.0, 3.0),
            DisturbanceLevel::High => (5.0, 5.0),
        };
        (f64::to_radians(deg), cm / 100.0)
    }
}

/// Which transform a disturbance perturbs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceTarget {
    /// The true hand-eye transform jumps; the filter has to track it.
    #[default]
    Truth,
    /// The estimate is kicked; frames carry the kick for the pipeline to apply.
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    pub period: usize,
    pub level: DisturbanceLevel,
    #[serde(default)]
    pub target: DisturbanceTarget,
}

impl DisturbanceSchedule {
    pub fn new(level: DisturbanceLevel) -> Self {
        Self { period: 25, level, target: DisturbanceTarget::Truth }
    }

    pub fn is_scheduled(&self, frame_index: usize) -> bool {
        frame_index > 0 && frame_index % self.period == 0
    }
}

/// Uniform per-component perturbation within the level's bounds.
pub fn draw_disturbance<R: Rng>(level: DisturbanceLevel, rng: &mut R) -> Vec6 {
    let (ang, lin) = level.bounds();
    Vec6::from_fn(|i, _| {
        let b = if i < 3 { ang } else { lin };
        rng.random_range(-b..=b)
    })
}

/// `nominal` plus a fresh perturbation on scheduled frames; `current` otherwise. Perturbations
/// are not cumulative: each interval is offset from the nominal state.
pub fn apply_disturbance<R: Rng>(
    nominal: &Vec6,
    current: &Vec6,
    schedule: &DisturbanceSchedule,
    frame_index: usize,
    rng: &mut R,
) -> Vec6 {
    if schedule.is_scheduled(frame_index) {
        nominal + draw_disturbance(schedule.level, rng)
    } else {
        *current
    }
}

/// Joint-space waypoints visited at a fixed pace with Catmull–Rom cubic blending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vec<f64>>,
    pub frames_per_segment: usize,
}

impl Trajectory {
    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if self.waypoints.is_empty() || self.frames_per_segment == 0 {
            return Err(Error::InvalidConfig("trajectory needs waypoints and a positive pace".into()));
        }
        if let Some(w) = self.waypoints.iter().find(|w| w.len() != joint_count) {
            return Err(Error::DimensionMismatch { expected: joint_count, got: w.len() });
        }
        Ok(())
    }

    pub fn sample(&self, frame: usize) -> Vec<f64> {
        let n = self.waypoints.len();
        let seg = frame / self.frames_per_segment;
        let s = (frame % self.frames_per_segment) as f64 / self.frames_per_segment as f64;
        let at = |i: isize| &self.waypoints[i.clamp(0, n as isize - 1) as usize];
        let i = (seg.min(n - 1)) as isize;
        if seg >= n - 1 {
            return at(n as isize - 1).clone();
        }
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        let (s2, s3) = (s * s, s * s * s);
        (0..p1.len())
            .map(|j| {
                0.5 * (2.0 * p1[j]
                    + (p2[j] - p0[j]) * s
                    + (2.0 * p0[j] - 5.0 * p1[j] + 4.0 * p2[j] - p3[j]) * s2
                    + (3.0 * p1[j] - p0[j] - 3.0 * p2[j] + p3[j]) * s3)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub model: InstrumentModel,
    pub intrinsics: CameraIntrinsics,
    pub image_size: (f64, f64),
    /// Prior camera ← base transform; the true one is `t_init ∘ T(true_state)`.
    pub t_init: Transform,
    pub true_state: Vec6,
    pub trajectory: Trajectory,
    pub frame_count: usize,
    pub pixel_noise_sigma: f64,
    pub outlier_count: usize,
    pub dropout_probability: f64,
    pub disturbance: Option<DisturbanceSchedule>,
    /// A keypoint is detectable when its outward normal is within this angle of the direction
    /// to the camera.
    pub max_view_angle: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.trajectory.validate(self.model.chain.joint_count())?;
        if self.frame_count == 0 {
            return Err(Error::InvalidConfig("frame_count must be at least 1".into()));
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("pixel noise must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_probability) {
            return Err(Error::InvalidConfig("dropout probability must be in [0, 1]".into()));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        if let Some(d) = &self.disturbance {
            if d.period == 0 {
                return Err(Error::InvalidConfig("disturbance period must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn true_transform(&self, x: &Vec6) -> Transform {
        self.t_init.compose(&state_to_transform(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub t: f64,
    pub q: Vec<f64>,
    pub observations: Vec<PixelPoint>,
    /// Generating label per observation; `None` for outliers.
    pub labels: Vec<Option<Label>>,
    /// True state active at this frame.
    pub truth: Vec6,
    /// Perturbation to add to the estimate before processing this frame.
    pub kick: Option<Vec6>,
}

/// Camera ← world transform of a camera at `eye` looking at `target`; the image v axis points
/// along the projection of `down`.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, down: &Vector3<f64>) -> Transform {
    let z = (target - eye).normalize();
    let x = -z.cross(down).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Transform::new(r, -(r * eye))
}

/// Labels and pixels of keypoints detectable under the true transform.
pub fn visible_keypoints(config: &SceneConfig, q: &[f64], x: &Vec6) -> Result<Vec<(Label, PixelPoint)>> {
    let frames = forward_kinematics(&config.model.chain, q)?;
    let cam = config.true_transform(x);
    let cos_max = config.max_view_angle.cos();
    let (w, h) = config.image_size;
    let mut out = Vec::new();
    for kp in &config.model.keypoints {
        let frame = &frames[kp.joint_index];
        let p_r = frame.apply(&kp.local_position);
        let p_c = chain_point(&config.t_init, x, &p_r);
        let Ok(px) = project_with_min(&config.intrinsics, &p_c, DEFAULT_Z_MIN) else { continue };
        if !(px.u >= 0.0 && px.u < w && px.v >= 0.0 && px.v < h) {
            continue;
        }
        if let Some(n) = kp.normal {
            let n_c = cam.rotation * frame.rotation * n;
            if n_c.normalize().dot(&(-p_c).normalize()) < cos_max {
                continue;
            }
        }
        out.push((kp.label, px));
    }
    Ok(out)
}

/// Streams the frames of a scene.
pub struct SceneGenerator<'a> {
    config: &'a SceneConfig,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    frame: usize,
    current: Vec6,
}

pub fn generate_scene(config: &SceneConfig) -> Result<SceneGenerator<'_>> {
    config.validate()?;
    Ok(SceneGenerator {
        config,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        noise: Normal::new(0.0, config.pixel_noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?,
        frame: 0,
        current: config.true_state,
    })
}

impl SceneGenerator<'_> {
    fn next_frame(&mut self) -> Result<FrameRecord> {
        let cfg = self.config;
        let index = self.frame;
        let mut kick = None;
        if let Some(schedule) = &cfg.disturbance {
            if schedule.is_scheduled(index) {
                match schedule.target {
                    DisturbanceTarget::Truth => {
                        self.current = apply_disturbance(&cfg.true_state, &self.current, schedule, index, &mut self.rng)
                    }
                    DisturbanceTarget::Estimate => kick = Some(draw_disturbance(schedule.level, &mut self.rng)),
                }
            }
        }
        let q = cfg.trajectory.sample(index);
        let mut obs: Vec<(Option<Label>, PixelPoint)> = Vec::new();
        for (label, px) in visible_keypoints(cfg, &q, &self.current)? {
            let noisy = PixelPoint::new(px.u + self.noise.sample(&mut self.rng), px.v + self.noise.sample(&mut self.rng));
            if self.rng.random::<f64>() < cfg.dropout_probability {
                continue;
            }
            obs.push((Some(label), noisy));
        }
        for _ in 0..cfg.outlier_count {
            let u = self.rng.random_range(0.0..cfg.image_size.0);
            let v = self.rng.random_range(0.0..cfg.image_size.1);
            obs.push((None, PixelPoint::new(u, v)));
        }
        obs.shuffle(&mut self.rng);
        self.frame += 1;
        Ok(FrameRecord {
            index,
            t: index as f64 / 30.0,
            q,
            labels: obs.iter().map(|o| o.0).collect(),
            observations: obs.iter().map(|o| o.1).collect(),
            truth: self.current,
            kick,
        })
    }
}

impl Iterator for SceneGenerator<'_> {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.frame < self.config.frame_count).then(|| self.next_frame())
    }
}

/// Stock trajectory families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StockScene {
    /// Slow sweep through the full roll range.
    Sweep,
    /// Fast articulation of every joint.
    Fast,
    /// Nearly static instrument.
    Static,
}

/// User-facing scene description; everything not given takes the stock defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub scene: StockScene,
    pub frame_count: usize,
    pub seed: u64,
    pub pixel_noise_sigma: f64,
    pub outlier_count: usize,
    pub dropout_probability: f64,
    pub disturbance: Option<DisturbanceSchedule>,
    /// Explicit true state; otherwise drawn uniformly within the initial error bounds.
    pub true_state: Option<[f64; 6]>,
    pub initial_error_deg: f64,
    pub initial_error_m: f64,
    pub max_view_angle_deg: f64,
    pub camera_distance: f64,
    /// Half-ranges of the waypoint joints: outer yaw/pitch (rad), insertion (m), wrist (rad).
    pub outer_joint_range: f64,
    pub insertion_range: f64,
    pub wrist_range: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            scene: StockScene::Sweep,
            frame_count: 500,
            seed: 0,
            pixel_noise_sigma: 1.0,
            outlier_count: 2,
            dropout_probability: 0.05,
            disturbance: None,
            true_state: None,
            initial_error_deg: 3.0,
            initial_error_m: 0.03,
            max_view_angle_deg: 70.0,
            camera_distance: 0.12,
            outer_joint_range: 0.15,
            insertion_range: 0.01,
            wrist_range: 0.35,
        }
    }
}

/// Nominal joint vector of the stock scenes.
pub const NOMINAL_Q: [f64; 6] = [0.0, 0.3, 0.1, 0.0, 0.0, 0.0];

impl SceneSpec {
    pub fn build(&self) -> Result<SceneConfig> {
        let model = InstrumentModel::surrogate_lnd();
        let intrinsics = CameraIntrinsics::new(1000.0, 1000.0, 640.0, 512.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5eed);
        let (frames_per_segment, amplitude, roll_range) = match self.scene {
            StockScene::Sweep => (40, 1.0, std::f64::consts::PI),
            StockScene::Fast => (10, 1.0, std::f64::consts::PI),
            StockScene::Static => (100, 0.1, 0.3),
        };
        let segments = self.frame_count / frames_per_segment + 3;
        let waypoints = (0..segments)
            .map(|_| {
                let a = amplitude;
                let (outer, ins, wrist) = (self.outer_joint_range, self.insertion_range, self.wrist_range);
                vec![
                    NOMINAL_Q[0] + a * rng.random_range(-outer..=outer),
                    NOMINAL_Q[1] + a * rng.random_range(-outer..=outer),
                    NOMINAL_Q[2] + a * rng.random_range(-ins..=ins),
                    rng.random_range(-roll_range..roll_range),
                    a * rng.random_range(-wrist..=wrist),
                    a * rng.random_range(-wrist..=wrist),
                ]
            })
            .collect();

        // Camera behind and beside the wrist, about 60° off the shaft.
        let frames = forward_kinematics(&model.chain, &NOMINAL_Q)?;
        let target = frames[3].translation;
        let shaft = frames[2].rotation * Vector3::z();
        let side = shaft.cross(&Vector3::y()).normalize();
        let dir = (-shaft * 60f64.to_radians().cos() + side * 60f64.to_radians().sin()).normalize();
        let eye = target + dir * self.camera_distance;
        let t_init = look_at(&eye, &target, &shaft);

        let true_state = match self.true_state {
            Some(x) => Vec6::from(x),
            None => {
                let (ang, lin) = (self.initial_error_deg.to_radians(), self.initial_error_m);
                Vec6::from_fn(|i, _| {
                    let b = if i < 3 { ang } else { lin };
                    if b > 0.0 {
                        rng.random_range(-b..=b)
                    } else {
                        0.0
                    }
                })
            }
        };
        let config = SceneConfig {
            model,
            intrinsics,
            image_size: (1280.0, 1024.0),
            t_init,
            true_state,
            trajectory: Trajectory { waypoints, frames_per_segment },
            frame_count: self.frame_count,
            pixel_noise_sigma: self.pixel_noise_sigma,
            outlier_count: self.outlier_count,
            dropout_probability: self.dropout_probability,
            disturbance: self.disturbance,
            max_view_angle: self.max_view_angle_deg.to_radians(),
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Hand-eye error between two states: translation difference in millimeters and geodesic
/// rotation angle in radians.
pub fn state_error(estimate: &Vec6, truth: &Vec6) -> (f64, f64) {
    let a = state_to_transform(estimate);
    let b = state_to_transform(truth);
    let dt = (a.translation - b.translation).norm() * 1000.0;
    let r = a.rotation * b.rotation.transpose();
    let dr = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    (dt, dr)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AssociationScore {
    /// Observations assigned to a keypoint.
    pub matched: usize,
    pub correct: usize,
    pub mismatched: usize,
    /// Observations that have a true label.
    pub labeled: usize,
}

impl AssociationScore {
    pub fn precision(&self) -> f64 {
        if self.matched == 0 {
            1.0
        } else {
            self.correct as f64 / self.matched as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.labeled == 0 {
            1.0
        } else {
            self.correct as f64 / self.labeled as f64
        }
    }
}

/// Compares assigned labels with generating labels, observation by observation.
pub fn score_association(assigned: &[Option<Label>], truth: &[Option<Label>]) -> AssociationScore {
    let mut s = AssociationScore::default();
    for (a, t) in assigned.iter().zip(truth) {
        if t.is_some() {
            s.labeled += 1;
        }
        if let Some(a) = a {
            s.matched += 1;
            if Some(*a) == *t {
                s.correct += 1;
            } else {
                s.mismatched += 1;
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameScore {
    pub dt_mm: f64,
    pub dr_rad: f64,
    /// Mean camera-frame keypoint position error, in millimeters.
    pub keypoint_error_mm: f64,
    pub association: AssociationScore,
}

/// Scores one frame's estimate and association against ground truth.
pub fn score_frame(config: &SceneConfig, frame: &FrameRecord, estimate: &Vec6, assigned: &[Option<Label>]) -> Result<FrameScore> {
    let (dt_mm, dr_rad) = state_error(estimate, &frame.truth);
    let frames = forward_kinematics(&config.model.chain, &frame.q)?;
    let est = config.true_transform(estimate);
    let tru = config.true_transform(&frame.truth);
    let errs: Vec<f64> = config
        .model
        .keypoints
        .iter()
        .map(|kp| {
            let p = frames[kp.joint_index].apply(&kp.local_position);
            (est.apply(&p) - tru.apply(&p)).norm() * 1000.0
        })
        .collect();
    Ok(FrameScore {
        dt_mm,
        dr_rad,
        keypoint_error_mm: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
        association: score_association(assigned, &frame.labels),
    })
}

/// Per-frame scores for a run of estimates aligned with `frames`.
pub fn score_run(
    config: &SceneConfig,
    frames: &[FrameRecord],
    estimates: &[Vec6],
    assignments: &[Vec<Option<Label>>],
) -> Result<Vec<FrameScore>> {
    if frames.len() != estimates.len() || frames.len() != assignments.len() {
        return Err(Error::DimensionMismatch { expected: frames.len(), got: estimates.len().min(assignments.len()) });
    }
    frames
        .iter()
        .zip(estimates)
        .zip(assignments)
        .map(|((f, x), a)| score_frame(config, f, x, a))
        .collect()
}
