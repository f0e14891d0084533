//! Calibration filters: sequential EKF, adaptive EKF and a particle filter.
//!
//! All three consume the matched pairs of one frame. Pairs are processed in ascending label
//! order so that the sequential updates are deterministic regardless of detection order.

use nalgebra::{Cholesky, Matrix2, SMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::association::{NoiseModel, Prediction};
use crate::camera::{predict_pixel, CameraIntrinsics, Mat2x6, PixelPoint, DEFAULT_Z_MIN};
use crate::geometry::{forward_kinematics, symmetrize_psd, CalibrationState, InstrumentModel, Label, Transform};
use crate::{Error, Mat6, Result, Vec6};

/// Eigenvalue floor applied to covariances after each update.
pub const COVARIANCE_FLOOR: f64 = 1e-12;
/// Lower bound on the innovation norm in particle weights, in pixels.
pub const PF_WEIGHT_EPS: f64 = 1e-3;

type Mat6x2 = SMatrix<f64, 6, 2>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Aekf,
    Pf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub noise: NoiseModel,
    pub forget_factor: f64,
    pub particle_count: usize,
    pub effective_threshold: f64,
    pub seed: u64,
    /// Replace the particle filter's pass-through covariance by the weighted sample covariance.
    pub pf_adapt_cov: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::Ekf,
            noise: NoiseModel::filter_default(),
            forget_factor: 0.6,
            particle_count: 1000,
            effective_threshold: 100.0,
            seed: 0,
            pf_adapt_cov: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.forget_factor > 0.0 && self.forget_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!("forget factor {} not in (0, 1]", self.forget_factor)));
        }
        if self.particle_count == 0 {
            return Err(Error::InvalidConfig("particle count must be at least 1".into()));
        }
        if !(self.effective_threshold >= 1.0 && self.effective_threshold <= self.particle_count as f64) {
            return Err(Error::InvalidConfig(format!(
                "effective particle threshold {} not in [1, {}]",
                self.effective_threshold, self.particle_count
            )));
        }
        Ok(())
    }
}

/// Camera-side quantities needed to re-project a keypoint at an arbitrary state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementContext {
    pub t_init: Transform,
    pub k: CameraIntrinsics,
}

impl MeasurementContext {
    fn predict(&self, x: &Vec6, p_r: &Vector3<f64>) -> Result<(PixelPoint, Mat2x6)> {
        let (px, jac) = predict_pixel(&self.t_init, x, p_r, &self.k, DEFAULT_Z_MIN)?;
        Ok((px, jac.h))
    }
}

/// An observation paired with a labeled keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub label: Label,
    pub observation: PixelPoint,
    /// Keypoint position in the robot base frame.
    pub p_r: Vector3<f64>,
    /// Pixel predicted at association time.
    pub predicted: PixelPoint,
    pub innovation: Vector2<f64>,
}

impl MatchedPair {
    pub fn new(pred: &Prediction, observation: PixelPoint) -> Self {
        Self {
            label: pred.label,
            observation,
            p_r: pred.p_r,
            predicted: pred.pixel,
            innovation: observation.to_vector() - pred.pixel.to_vector(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub state: CalibrationState,
    /// Innovations of the pairs that were used, in processing order.
    pub innovations: Vec<Vector2<f64>>,
    /// Adapted covariances (AEKF only).
    pub sigma_e: Option<Mat6>,
    pub sigma_v: Option<Matrix2<f64>>,
    /// Effective sample size before resampling (PF only).
    pub effective_sample_size: Option<f64>,
}

impl FilterOutput {
    fn plain(state: CalibrationState, innovations: Vec<Vector2<f64>>) -> Self {
        Self { state, innovations, sigma_e: None, sigma_v: None, effective_sample_size: None }
    }

    pub fn rms_innovation(&self) -> Option<f64> {
        if self.innovations.is_empty() {
            return None;
        }
        let ss: f64 = self.innovations.iter().map(|v| v.norm_squared()).sum();
        Some((ss / self.innovations.len() as f64).sqrt())
    }
}

fn sorted(matches: &[MatchedPair]) -> Vec<MatchedPair> {
    let mut m = matches.to_vec();
    m.sort_by_key(|p| p.label);
    m
}

/// Sequential EKF. The prediction step adds `Σe`; each pair is then linearized at the running
/// estimate. Pairs behind the camera or with a singular innovation covariance are skipped.
pub fn ekf_update(
    prev: &CalibrationState,
    matches: &[MatchedPair],
    noise: &NoiseModel,
    ctx: &MeasurementContext,
) -> FilterOutput {
    let mut x = prev.x;
    let mut sigma = prev.sigma_x + noise.sigma_e;
    let mut innovations = Vec::with_capacity(matches.len());
    for pair in sorted(matches) {
        let (pixel, h) = match ctx.predict(&x, &pair.p_r) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("ekf: skipping {}: {e}", pair.label);
                continue;
            }
        };
        let inn = pair.observation.to_vector() - pixel.to_vector();
        let c = h * sigma * h.transpose() + noise.sigma_v_for(pair.label);
        let Some(c_inv) = c.try_inverse() else {
            log::debug!("ekf: singular innovation covariance for {}", pair.label);
            continue;
        };
        let gain: Mat6x2 = sigma * h.transpose() * c_inv;
        x += gain * inn;
        sigma = (Mat6::identity() - gain * h) * sigma;
        innovations.push(inn);
    }
    FilterOutput::plain(CalibrationState::new(x, symmetrize_psd(&sigma, COVARIANCE_FLOOR)), innovations)
}

/// Adaptive EKF: an EKF step followed by innovation/residual based adaptation of `Σe` and `Σv`.
///
/// The adaptation gains use the previous state covariance, as in the original formulation; a
/// conventional AEKF would use the updated one. Without matches the covariances are held.
pub fn aekf_update(
    prev: &CalibrationState,
    noise: &NoiseModel,
    matches: &[MatchedPair],
    forget_factor: f64,
    ctx: &MeasurementContext,
) -> FilterOutput {
    let ekf = ekf_update(prev, matches, noise, ctx);
    let used: Vec<MatchedPair> = sorted(matches)
        .into_iter()
        .filter(|p| ctx.predict(&ekf.state.x, &p.p_r).is_ok())
        .collect();
    let m_k = ekf.innovations.len();
    if m_k == 0 || used.len() != m_k {
        if used.len() != m_k {
            log::debug!("aekf: pair set changed between update and adaptation; holding covariances");
        }
        return FilterOutput { sigma_e: Some(noise.sigma_e), sigma_v: Some(noise.sigma_v), ..ekf };
    }
    let a = forget_factor;
    let w = (1.0 - a) / m_k as f64;
    let mut sigma_e = a * noise.sigma_e;
    let mut sigma_v = a * noise.sigma_v;
    let sigma_prev = &prev.sigma_x;
    for (pair, inn) in used.iter().zip(&ekf.innovations) {
        let (pixel, h) = ctx.predict(&ekf.state.x, &pair.p_r).expect("checked above");
        let res = pair.observation.to_vector() - pixel.to_vector();
        let hph = h * sigma_prev * h.transpose();
        sigma_v += w * (res * res.transpose() + hph);
        let c = hph + noise.sigma_v;
        let Some(c_inv) = c.try_inverse() else { continue };
        let gain: Mat6x2 = sigma_prev * h.transpose() * c_inv;
        let ki = gain * inn;
        sigma_e += w * ki * ki.transpose();
    }
    FilterOutput {
        sigma_e: Some(symmetrize_psd(&sigma_e, COVARIANCE_FLOOR)),
        sigma_v: Some((sigma_v + sigma_v.transpose()) * 0.5),
        ..ekf
    }
}

/// Draws `n` samples from `N(mean, cov)`.
pub fn sample_gaussian<R: Rng>(mean: &Vec6, cov: &Mat6, n: usize, rng: &mut R) -> Vec<Vec6> {
    let chol = Cholesky::new(*cov)
        .or_else(|| Cholesky::new(cov + Mat6::identity() * 1e-12))
        .or_else(|| Cholesky::new(symmetrize_psd(cov, 1e-12)));
    let l = chol.map(|c| c.l()).unwrap_or_else(Mat6::zeros);
    (0..n)
        .map(|_| {
            let z = Vec6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            mean + l * z
        })
        .collect()
}

/// Indices selected by stratified resampling of normalized `weights`.
pub fn stratified_resample<R: Rng>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut j = 0;
    for i in 0..n {
        let u = (i as f64 + rng.random::<f64>()) / n as f64;
        while j + 1 < n && cumulative + weights[j] < u {
            cumulative += weights[j];
            j += 1;
        }
        out.push(j);
    }
    out
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Particle filter step. Particles are drawn around the previous estimate and weighted by the
/// reciprocal norm of their stacked innovation over the frame's matched pairs. The output is
/// the weighted mean; the covariance passes through unless `pf_adapt_cov` is set.
pub fn pf_update<R: Rng>(
    prev: &CalibrationState,
    matches: &[MatchedPair],
    config: &FilterConfig,
    ctx: &MeasurementContext,
    rng: &mut R,
) -> FilterOutput {
    if matches.is_empty() {
        return FilterOutput::plain(*prev, Vec::new());
    }
    let pairs = sorted(matches);
    let particles = sample_gaussian(&prev.x, &prev.sigma_x, config.particle_count, rng);
    let mut weights: Vec<f64> = particles
        .iter()
        .map(|x| {
            let mut ss = 0.0;
            for p in &pairs {
                match ctx.predict(x, &p.p_r) {
                    Ok((px, _)) => ss += (p.observation.to_vector() - px.to_vector()).norm_squared(),
                    Err(_) => return 0.0,
                }
            }
            1.0 / ss.sqrt().max(PF_WEIGHT_EPS)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        log::debug!("pf: every particle projects behind the camera; state held");
        return FilterOutput::plain(*prev, Vec::new());
    }
    weights.iter_mut().for_each(|w| *w /= total);
    let mean = particles.iter().zip(&weights).fold(Vec6::zeros(), |acc, (x, w)| acc + x * *w);
    let ess = effective_sample_size(&weights);
    let mut sigma_x = prev.sigma_x;
    if config.pf_adapt_cov {
        let cov = particles.iter().zip(&weights).fold(Mat6::zeros(), |acc, (x, w)| {
            let d = x - mean;
            acc + d * d.transpose() * *w
        });
        sigma_x = symmetrize_psd(&cov, COVARIANCE_FLOOR);
    }
    if ess < config.effective_threshold {
        // The next step redraws around the new mean, so the resampled set only feeds diagnostics.
        let mut idx = stratified_resample(&weights, rng);
        idx.dedup();
        log::trace!("pf: resampled (ess {ess:.1}), {} distinct particles kept", idx.len());
    }
    let innovations = pairs
        .iter()
        .filter_map(|p| ctx.predict(&mean, &p.p_r).ok().map(|(px, _)| p.observation.to_vector() - px.to_vector()))
        .collect();
    FilterOutput {
        state: CalibrationState::new(mean, sigma_x),
        innovations,
        sigma_e: None,
        sigma_v: None,
        effective_sample_size: Some(ess),
    }
}

/// Predictions for every keypoint of `model` at joint vector `q`; keypoints behind the camera
/// are dropped.
pub fn predict_keypoints(
    x: &Vec6,
    model: &InstrumentModel,
    q: &[f64],
    t_init: &Transform,
    k: &CameraIntrinsics,
) -> Result<Vec<Prediction>> {
    let frames = forward_kinematics(&model.chain, q)?;
    Ok(predict_from_frames(x, model, &frames, t_init, k))
}

pub fn predict_from_frames(
    x: &Vec6,
    model: &InstrumentModel,
    frames: &[Transform],
    t_init: &Transform,
    k: &CameraIntrinsics,
) -> Vec<Prediction> {
    model
        .keypoints
        .iter()
        .filter_map(|kp| {
            let p_r = frames[kp.joint_index].apply(&kp.local_position);
            let (pixel, jacobian) = predict_pixel(t_init, x, &p_r, k, DEFAULT_Z_MIN).ok()?;
            Some(Prediction { label: kp.label, pixel, p_r, jacobian })
        })
        .collect()
}

/// A filter of any kind together with its evolving state.
#[derive(Debug, Clone)]
pub struct Filter {
    config: FilterConfig,
    state: CalibrationState,
    noise: NoiseModel,
    rng: ChaCha8Rng,
}

impl Filter {
    pub fn new(config: FilterConfig, initial: CalibrationState) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let noise = config.noise.clone();
        Ok(Self { config, state: initial, noise, rng })
    }

    pub fn state(&self) -> &CalibrationState {
        &self.state
    }

    /// Overwrites the estimate, keeping adapted noise and the random stream.
    pub fn set_state(&mut self, state: CalibrationState) {
        self.state = state;
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Current (possibly adapted) noise model.
    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn update(&mut self, matches: &[MatchedPair], ctx: &MeasurementContext) -> FilterOutput {
        let out = match self.config.kind {
            FilterKind::Ekf => ekf_update(&self.state, matches, &self.noise, ctx),
            FilterKind::Aekf => {
                let out = aekf_update(&self.state, &self.noise, matches, self.config.forget_factor, ctx);
                if let (Some(se), Some(sv)) = (out.sigma_e, out.sigma_v) {
                    self.noise.sigma_e = se;
                    self.noise.sigma_v = sv;
                }
                out
            }
            FilterKind::Pf => pf_update(&self.state, matches, &self.config, ctx, &mut self.rng),
        };
        self.state = out.state;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Label;
    use rand_chacha::ChaCha8Rng;

    fn ctx() -> MeasurementContext {
        MeasurementContext {
            t_init: Transform::from_translation(Vector3::new(0.0, 0.0, 0.15)),
            k: CameraIntrinsics::new(1000.0, 1000.0, 640.0, 512.0).unwrap(),
        }
    }

    fn points() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.01, 0.0, 0.0),
            Vector3::new(-0.01, 0.005, 0.003),
            Vector3::new(0.0, -0.012, -0.004),
            Vector3::new(0.006, 0.008, 0.01),
            Vector3::new(-0.007, -0.003, -0.009),
            Vector3::new(0.002, 0.011, 0.006),
        ]
    }

    fn matches_at(truth: &Vec6, est: &Vec6) -> Vec<MatchedPair> {
        let c = ctx();
        let labels = Label::standard_set();
        points()
            .iter()
            .zip(labels)
            .map(|(p, label)| {
                let (obs, _) = c.predict(truth, p).unwrap();
                let (pred, _) = c.predict(est, p).unwrap();
                MatchedPair {
                    label,
                    observation: obs,
                    p_r: *p,
                    predicted: pred,
                    innovation: obs.to_vector() - pred.to_vector(),
                }
            })
            .collect()
    }

    fn prior() -> CalibrationState {
        CalibrationState::new(Vec6::zeros(), Mat6::from_diagonal(&Vec6::new(1e-4, 1e-4, 1e-4, 1e-6, 1e-6, 1e-6)))
    }

    #[test]
    fn empty_matches_inflate_covariance() {
        let noise = NoiseModel::filter_default();
        let out = ekf_update(&prior(), &[], &noise, &ctx());
        assert_eq!(out.state.x, Vec6::zeros());
        assert!((out.state.sigma_x - (prior().sigma_x + noise.sigma_e)).norm() < 1e-18);
    }

    #[test]
    fn zero_innovation_keeps_state_and_shrinks_covariance() {
        let noise = NoiseModel::filter_default();
        let m = matches_at(&Vec6::zeros(), &Vec6::zeros());
        let out = ekf_update(&prior(), &m, &noise, &ctx());
        assert!(out.state.x.norm() < 1e-15);
        let diff = prior().sigma_x + noise.sigma_e - out.state.sigma_x;
        assert!(diff.symmetric_eigen().eigenvalues.min() > -1e-15);
        assert!(diff.trace() > 0.0);
    }

    #[test]
    fn scalar_kalman_gain() {
        // Independent 1-D Kalman check: an observation of x-translation only.
        // With H = [0 0 0 f/z 0 0] and diagonal prior, the gain is σ̄h/(h²σ̄ + σv).
        let c = MeasurementContext {
            t_init: Transform::identity(),
            k: CameraIntrinsics::new(1000.0, 1000.0, 0.0, 0.0).unwrap(),
        };
        let p = Vector3::new(0.0, 0.0, 0.2);
        let sigma_bar = 1e-6;
        let mut prior = CalibrationState::new(Vec6::zeros(), Mat6::zeros());
        prior.sigma_x[(3, 3)] = sigma_bar;
        let noise = NoiseModel::new(Mat6::zeros(), Matrix2::identity() * 4.0);
        let obs = PixelPoint::new(2.0, 0.0);
        let pair = MatchedPair {
            label: Label::standard_set()[0],
            observation: obs,
            p_r: p,
            predicted: PixelPoint::new(0.0, 0.0),
            innovation: obs.to_vector(),
        };
        let out = ekf_update(&prior, &[pair], &noise, &c);
        let h = 1000.0 / 0.2;
        let gain = sigma_bar * h / (h * h * sigma_bar + 4.0);
        assert!((out.state.x[3] - gain * 2.0).abs() < 1e-15);
        assert!((out.state.sigma_x[(3, 3)] - (1.0 - gain * h) * sigma_bar).abs() < 1e-18);
    }

    #[test]
    fn ekf_converges_on_noiseless_sequence() {
        let truth = Vec6::new(0.02, -0.015, 0.01, 0.002, -0.001, 0.0015);
        let noise = NoiseModel::filter_default();
        let mut state = CalibrationState::new(Vec6::zeros(), Mat6::from_diagonal(&Vec6::new(1e-3, 1e-3, 1e-3, 1e-5, 1e-5, 1e-5)));
        for _ in 0..100 {
            let m = matches_at(&truth, &state.x);
            state = ekf_update(&state, &m, &noise, &ctx()).state;
        }
        let m = matches_at(&truth, &state.x);
        let rms = (m.iter().map(|p| p.innovation.norm_squared()).sum::<f64>() / m.len() as f64).sqrt();
        assert!(rms < 0.1, "rms {rms}");
        assert!((state.x.fixed_rows::<3>(3) - truth.fixed_rows::<3>(3)).norm() < 5e-4);
    }

    #[test]
    fn order_independent_of_input_permutation() {
        let truth = Vec6::new(0.01, 0.0, -0.02, 0.001, 0.0, 0.0);
        let noise = NoiseModel::filter_default();
        let mut m = matches_at(&truth, &Vec6::zeros());
        let a = ekf_update(&prior(), &m, &noise, &ctx());
        m.reverse();
        let b = ekf_update(&prior(), &m, &noise, &ctx());
        assert_eq!(a.state.x, b.state.x);
        assert_eq!(a.state.sigma_x, b.state.sigma_x);
    }

    #[test]
    fn aekf_with_unit_forget_factor_is_ekf() {
        let truth = Vec6::new(0.01, 0.003, -0.02, 0.001, 0.0005, 0.0);
        let noise = NoiseModel::filter_default();
        let m = matches_at(&truth, &Vec6::zeros());
        let e = ekf_update(&prior(), &m, &noise, &ctx());
        let a = aekf_update(&prior(), &noise, &m, 1.0, &ctx());
        assert_eq!(e.state.x, a.state.x);
        assert_eq!(e.state.sigma_x, a.state.sigma_x);
        assert_eq!(a.sigma_e.unwrap(), noise.sigma_e);
        assert_eq!(a.sigma_v.unwrap(), noise.sigma_v);
    }

    #[test]
    fn aekf_zero_residual_adaptation() {
        // One pair with zero innovation: Σe decays by α, Σv → αΣv + (1-α)·H Σx Hᵀ.
        let noise = NoiseModel::filter_default();
        let m = vec![matches_at(&Vec6::zeros(), &Vec6::zeros())[0]];
        let alpha = 0.6;
        let a = aekf_update(&prior(), &noise, &m, alpha, &ctx());
        let h = crate::camera::measurement_jacobian(&ctx().t_init, &Vec6::zeros(), &m[0].p_r, &ctx().k).unwrap().h;
        let expected_v = alpha * noise.sigma_v + (1.0 - alpha) * h * prior().sigma_x * h.transpose();
        assert!((a.sigma_v.unwrap() - expected_v).norm() < 1e-9);
        assert!((a.sigma_e.unwrap() - alpha * noise.sigma_e).norm() < 1e-18);
    }

    #[test]
    fn aekf_without_matches_holds_covariances() {
        let noise = NoiseModel::filter_default();
        let a = aekf_update(&prior(), &noise, &[], 0.6, &ctx());
        assert_eq!(a.sigma_e.unwrap(), noise.sigma_e);
        assert_eq!(a.sigma_v.unwrap(), noise.sigma_v);
    }

    #[test]
    fn pf_single_particle_is_the_sample() {
        let cfg = FilterConfig { particle_count: 1, effective_threshold: 1.0, ..FilterConfig::default() };
        let m = matches_at(&Vec6::zeros(), &Vec6::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = pf_update(&prior(), &m, &cfg, &ctx(), &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = sample_gaussian(&prior().x, &prior().sigma_x, 1, &mut rng)[0];
        assert!((out.state.x - sample).norm() < 1e-15);
        assert_eq!(out.state.sigma_x, prior().sigma_x);
    }

    #[test]
    fn pf_is_seed_deterministic() {
        let cfg = FilterConfig { kind: FilterKind::Pf, particle_count: 200, ..FilterConfig::default() };
        let m = matches_at(&Vec6::new(0.005, 0.0, 0.0, 0.0005, 0.0, 0.0), &Vec6::zeros());
        let run = || pf_update(&prior(), &m, &cfg, &ctx(), &mut ChaCha8Rng::seed_from_u64(4)).state.x;
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_weights_have_full_ess() {
        let w = vec![0.01; 100];
        assert!((effective_sample_size(&w) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn stratified_resampling_follows_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = stratified_resample(&[0.0, 1.0, 0.0], &mut rng);
        assert_eq!(idx, vec![1, 1, 1]);
        let w = [0.25, 0.25, 0.5, 0.0];
        let idx = stratified_resample(&w, &mut rng);
        assert_eq!(idx.iter().filter(|&&i| i == 2).count(), 2);
        assert!(!idx.contains(&3));
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        assert!(FilterConfig { forget_factor: 0.0, ..Default::default() }.validate().is_err());
        assert!(FilterConfig { particle_count: 0, ..Default::default() }.validate().is_err());
        assert!(FilterConfig { effective_threshold: 5000.0, ..Default::default() }.validate().is_err());
    }
}
