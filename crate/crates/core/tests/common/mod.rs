//! Shared helpers for the integration tests: random association scenes, a brute-force JCBB
//! reference and a whole-run driver over simulated scenes.

#![allow(dead_code)]

use calibkit::association::{NoiseModel, Observation, Prediction};
use calibkit::camera::{predict_pixel, CameraIntrinsics, PixelPoint, DEFAULT_Z_MIN};
use calibkit::geometry::{CalibrationState, Label, Transform};
use calibkit::pipeline::{default_initial_covariance, EstimatorKind, GatingMode, Pipeline, PipelineConfig};
use calibkit::simulator::{generate_scene, score_association, state_error, FrameRecord, SceneConfig};
use calibkit::Vec6;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn chi2_inv(dof: usize, alpha: f64) -> f64 {
    ChiSquared::new(dof as f64).unwrap().inverse_cdf(alpha)
}

/// Random predictions from a real projection model and observations drawn around a shifted
/// state, mixed with outliers placed among the predictions so that gates overlap.
pub fn random_association_scene<R: Rng>(rng: &mut R) -> (Vec<Prediction>, Vec<Observation>) {
    let k = CameraIntrinsics::new(1000.0, 1000.0, 640.0, 512.0).unwrap();
    let t_init = Transform::from_translation(Vector3::new(0.0, 0.0, 0.15));
    let labels = Label::standard_set();
    let n = rng.random_range(1..=8usize);
    let x = Vec6::from_fn(|i, _| if i < 3 { rng.random_range(-0.05..0.05) } else { rng.random_range(-0.01..0.01) });
    let x_true = x + Vec6::from_fn(|i, _| if i < 3 { rng.random_range(-0.03..0.03) } else { rng.random_range(-0.005..0.005) });
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for &label in labels.iter().take(n) {
        let p_r = Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        let (pixel, jacobian) = predict_pixel(&t_init, &x, &p_r, &k, DEFAULT_Z_MIN).unwrap();
        let (observed, _) = predict_pixel(&t_init, &x_true, &p_r, &k, DEFAULT_Z_MIN).unwrap();
        preds.push(Prediction { label, pixel, p_r, jacobian });
        truth.push(observed);
    }
    let outliers = rng.random_range(0..=3usize);
    let inliers = rng.random_range(0..=n.min(6 - outliers));
    let (u0, u1, v0, v1) = preds.iter().fold((f64::MAX, f64::MIN, f64::MAX, f64::MIN), |b, p| {
        (b.0.min(p.pixel.u), b.1.max(p.pixel.u), b.2.min(p.pixel.v), b.3.max(p.pixel.v))
    });
    let mut pixels = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for &j in order.iter().take(inliers) {
        pixels.push(PixelPoint::new(truth[j].u + rng.random_range(-2.0..2.0), truth[j].v + rng.random_range(-2.0..2.0)));
    }
    for _ in 0..outliers {
        pixels.push(PixelPoint::new(rng.random_range(u0 - 60.0..u1 + 60.0), rng.random_range(v0 - 60.0..v1 + 60.0)));
    }
    let obs = pixels.into_iter().enumerate().map(|(index, pixel)| Observation { index, pixel }).collect();
    (preds, obs)
}

/// `(D², l)` of a set of `(observation, prediction)` index pairs from the full stacked covariance.
pub fn joint_score(pairs: &[(usize, usize)], preds: &[Prediction], obs: &[Observation], noise: &NoiseModel) -> Option<(f64, f64)> {
    let k = pairs.len();
    if k == 0 {
        return Some((0.0, 0.0));
    }
    let n = 2 * k;
    let mut h = DMatrix::<f64>::zeros(n, 6);
    let mut r = DVector::<f64>::zeros(n);
    let mut c = DMatrix::<f64>::zeros(n, n);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        let p = &preds[j];
        for a in 0..2 {
            for b in 0..6 {
                h[(2 * row + a, b)] = p.jacobian.h[(a, b)];
            }
            for b in 0..2 {
                c[(2 * row + a, 2 * row + b)] = noise.sigma_v[(a, b)];
            }
        }
        r[2 * row] = obs[i].pixel.u - p.pixel.u;
        r[2 * row + 1] = obs[i].pixel.v - p.pixel.v;
    }
    let se = DMatrix::from_fn(6, 6, |a, b| noise.sigma_e[(a, b)]);
    c += &h * se * h.transpose();
    let ch = c.cholesky()?;
    let d2 = r.dot(&ch.solve(&r));
    let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Some((d2, n as f64 * (2.0 * std::f64::consts::PI).ln() + d2 + log_det))
}

/// Exhaustive search over every one-to-one assignment of individually compatible pairs.
/// Returns the best `(n_pair, l)`: most pairs, then smallest `l`, among jointly compatible sets.
pub fn exhaustive_jcbb(preds: &[Prediction], obs: &[Observation], noise: &NoiseModel, alpha: f64) -> (usize, f64) {
    let gate = chi2_inv(2, alpha);
    let compatible: Vec<Vec<usize>> = obs
        .iter()
        .enumerate()
        .map(|(i, _)| {
            (0..preds.len())
                .filter(|&j| joint_score(&[(i, j)], preds, obs, noise).is_some_and(|(d2, _)| d2 < gate))
                .collect()
        })
        .collect();
    let gates: Vec<f64> = (0..=obs.len()).map(|k| if k == 0 { f64::INFINITY } else { chi2_inv(2 * k, alpha) }).collect();
    let mut best = (0usize, 0.0f64);
    let mut current = Vec::new();
    let mut used = vec![false; preds.len()];
    enumerate(0, &compatible, &mut used, &mut current, &mut |pairs, reachable| {
        if reachable < best.0 {
            return false;
        }
        let Some(pairs) = pairs else { return true };
        let k = pairs.len();
        let Some((d2, l)) = joint_score(pairs, preds, obs, noise) else { return true };
        if k > 0 && !(d2 < gates[k]) {
            return true;
        }
        if k > best.0 || l < best.1 {
            best = (k, l);
        }
        true
    });
    best
}

fn enumerate(
    i: usize,
    compatible: &[Vec<usize>],
    used: &mut [bool],
    current: &mut Vec<(usize, usize)>,
    visit: &mut impl FnMut(Option<&[(usize, usize)]>, usize) -> bool,
) {
    // Pair count no completion of `current` can exceed; lets the visitor skip hopeless branches.
    let reachable = current.len() + compatible[i..].iter().filter(|c| !c.is_empty()).count();
    if !visit(None, reachable) {
        return;
    }
    if i == compatible.len() {
        visit(Some(current), reachable);
        return;
    }
    for &j in &compatible[i] {
        if !used[j] {
            used[j] = true;
            current.push((i, j));
            enumerate(i + 1, compatible, used, current, visit);
            current.pop();
            used[j] = false;
        }
    }
    enumerate(i + 1, compatible, used, current, visit);
}

/// Per-frame record of a simulated run.
#[derive(Debug, Clone)]
pub struct FrameLog {
    pub dt_mm: f64,
    pub dr_rad: f64,
    pub predictions_total: usize,
    pub predictions_kept: usize,
    pub matched: usize,
    pub mismatched: usize,
    pub assoc_secs: f64,
    pub filter_secs: f64,
}

pub fn frames(scene: &SceneConfig) -> Vec<FrameRecord> {
    generate_scene(scene).unwrap().collect::<calibkit::Result<Vec<_>>>().unwrap()
}

/// Runs the pipeline over `frames` starting from `x = 0`.
pub fn run(scene: &SceneConfig, frames: &[FrameRecord], estimator: EstimatorKind, gating_mode: GatingMode, visibility: bool) -> Vec<FrameLog> {
    let config = PipelineConfig { estimator, gating_mode, visibility, ..PipelineConfig::default() };
    run_with(scene, frames, config)
}

pub fn run_with(scene: &SceneConfig, frames: &[FrameRecord], config: PipelineConfig) -> Vec<FrameLog> {
    let initial = CalibrationState::new(Vec6::zeros(), default_initial_covariance());
    let mut pipeline = Pipeline::new(scene.model.clone(), scene.intrinsics, scene.t_init, initial, config).unwrap();
    frames
        .iter()
        .map(|f| {
            if let Some(kick) = &f.kick {
                pipeline.kick(kick);
            }
            let r = pipeline.process(&f.q, &f.observations).unwrap();
            let (dt_mm, dr_rad) = state_error(&r.state.x, &f.truth);
            let score = score_association(&r.assigned, &f.labels);
            FrameLog {
                dt_mm,
                dr_rad,
                predictions_total: r.predictions_total,
                predictions_kept: r.predictions_kept,
                matched: score.matched,
                mismatched: score.mismatched,
                assoc_secs: r.assoc_time.as_secs_f64(),
                filter_secs: r.filter_time.as_secs_f64(),
            }
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
