//! Browser front end for calibkit.
//!
//! Three operations back the page in `www/`: an instrument view with silhouettes and the
//! visibility verdict, a single-frame JCBB association, and a filter convergence run. Each takes
//! a JSON parameter object and returns a JSON document; the `*_json` functions are the same
//! thing for native callers and tests.

use calibkit::association::{jcbb_with, JcbbOptions, NoiseModel, Observation, DEFAULT_ALPHA};
use calibkit::camera::PixelPoint;
use calibkit::estimators::predict_from_frames;
use calibkit::geometry::{forward_kinematics, CalibrationState, Label, Side};
use calibkit::pipeline::{default_initial_covariance, EstimatorKind, GatingMode, Pipeline, PipelineConfig};
use calibkit::simulator::{
    generate_scene, score_association, state_error, visible_keypoints, DisturbanceLevel, DisturbanceSchedule,
    SceneConfig, SceneSpec, StockScene, NOMINAL_Q,
};
use calibkit::visibility::{check_visibility, project_segment_silhouette, prune_predictions, Line2D, DEFAULT_GAMMA};
use calibkit::Vec6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Longest convergence run the page may request.
pub const MAX_FRAMES: usize = 1000;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewParams {
    pub seed: u64,
    pub q: [f64; 6],
    /// Estimate minus truth: three angles (rad), three offsets (m).
    pub error: [f64; 6],
    pub gamma: f64,
}

impl Default for ViewParams {
    fn default() -> Self {
        Self { seed: 0, q: NOMINAL_Q, error: [0.0; 6], gamma: DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KeypointView {
    pub label: Label,
    pub u: f64,
    pub v: f64,
    /// Survives the visibility check at the estimate.
    pub kept: bool,
    /// Detectable at the true pose.
    pub visible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SilhouetteView {
    pub segment: &'static str,
    pub upper: Option<[[f64; 2]; 2]>,
    pub lower: Option<[[f64; 2]; 2]>,
    pub center: Option<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerdictView {
    pub visible_sides: Vec<Side>,
    pub dominant: Option<Side>,
    pub eta_fb: f64,
    pub eta_lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewReport {
    pub image: [f64; 2],
    pub keypoints: Vec<KeypointView>,
    pub silhouettes: Vec<SilhouetteView>,
    pub verdict: Option<VerdictView>,
    pub removed: usize,
}

fn scene(seed: u64) -> Result<SceneConfig, String> {
    SceneSpec { seed, ..SceneSpec::default() }.build().map_err(|e| e.to_string())
}

/// Part of `line` inside the `w × h` image, as two endpoints.
fn clip(line: &Line2D, w: f64, h: f64) -> Option<[[f64; 2]; 2]> {
    let mut pts: Vec<[f64; 2]> = Vec::new();
    let eps = 1e-9;
    if line.b.abs() > eps {
        for u in [0.0, w] {
            let v = -(line.a * u + line.c) / line.b;
            if (-eps..=h + eps).contains(&v) {
                pts.push([u, v]);
            }
        }
    }
    if line.a.abs() > eps {
        for v in [0.0, h] {
            let u = -(line.b * v + line.c) / line.a;
            if (-eps..=w + eps).contains(&u) {
                pts.push([u, v]);
            }
        }
    }
    let first = *pts.first()?;
    let far = pts.iter().copied().max_by(|a, b| {
        let d = |p: &[f64; 2]| (p[0] - first[0]).hypot(p[1] - first[1]);
        d(a).total_cmp(&d(b))
    })?;
    (far != first).then_some([first, far])
}

pub fn instrument_view(params: &ViewParams) -> Result<ViewReport, String> {
    let cfg = scene(params.seed)?;
    let fk = forward_kinematics(&cfg.model.chain, &params.q).map_err(|e| e.to_string())?;
    let x = cfg.true_state + Vec6::from(params.error);
    let preds = predict_from_frames(&x, &cfg.model, &fk, &cfg.t_init, &cfg.intrinsics);
    let verdict = check_visibility(&cfg.model, &fk, &cfg.t_init, &x, &cfg.intrinsics, &preds, params.gamma);
    let kept = match &verdict {
        Some(v) => prune_predictions(&preds, v),
        None => preds.clone(),
    };
    let visible = visible_keypoints(&cfg, &params.q, &cfg.true_state).map_err(|e| e.to_string())?;
    let (w, h) = cfg.image_size;
    let silhouettes = [("roll", &cfg.model.roll_segment), ("pitch", &cfg.model.pitch_segment)]
        .into_iter()
        .filter_map(|(name, seg)| {
            let s = project_segment_silhouette(seg, &fk, &cfg.t_init, &x, &cfg.intrinsics).ok()?;
            Some(SilhouetteView {
                segment: name,
                upper: clip(&s.edge_upper, w, h),
                lower: clip(&s.edge_lower, w, h),
                center: clip(&s.center, w, h),
            })
        })
        .collect();
    Ok(ViewReport {
        image: [w, h],
        keypoints: preds
            .iter()
            .map(|p| KeypointView {
                label: p.label,
                u: p.pixel.u,
                v: p.pixel.v,
                kept: kept.iter().any(|k| k.label == p.label),
                visible: visible.iter().any(|(l, _)| *l == p.label),
            })
            .collect(),
        silhouettes,
        verdict: verdict.map(|v| VerdictView {
            visible_sides: v.visible_sides,
            dominant: v.dominant,
            eta_fb: v.eta_fb,
            eta_lr: v.eta_lr,
        }),
        removed: preds.len() - kept.len(),
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociateParams {
    pub seed: u64,
    pub q: [f64; 6],
    pub error: [f64; 6],
    pub pixel_noise: f64,
    pub outliers: usize,
    pub visibility: bool,
    pub alpha: f64,
}

impl Default for AssociateParams {
    fn default() -> Self {
        Self {
            seed: 0,
            q: NOMINAL_Q,
            error: [0.0; 6],
            pixel_noise: 1.0,
            outliers: 2,
            visibility: true,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionView {
    pub label: Label,
    pub u: f64,
    pub v: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObservationView {
    pub u: f64,
    pub v: f64,
    pub truth: Option<Label>,
    pub assigned: Option<Label>,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssociateReport {
    pub image: [f64; 2],
    pub predictions: Vec<PredictionView>,
    pub observations: Vec<ObservationView>,
    pub n_pair: usize,
    pub d2: f64,
    pub l: f64,
    pub nodes: usize,
    pub mismatched: usize,
}

pub fn associate(params: &AssociateParams) -> Result<AssociateReport, String> {
    if !(params.pixel_noise >= 0.0) {
        return Err("pixel_noise must be non-negative".into());
    }
    let cfg = scene(params.seed)?;
    let fk = forward_kinematics(&cfg.model.chain, &params.q).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.pixel_noise).map_err(|e| e.to_string())?;
    let (w, h) = cfg.image_size;
    let mut obs: Vec<(Option<Label>, PixelPoint)> = visible_keypoints(&cfg, &params.q, &cfg.true_state)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(l, p)| (Some(l), PixelPoint::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng))))
        .collect();
    for _ in 0..params.outliers {
        obs.push((None, PixelPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h))));
    }

    let x = cfg.true_state + Vec6::from(params.error);
    let all = predict_from_frames(&x, &cfg.model, &fk, &cfg.t_init, &cfg.intrinsics);
    let preds = match params
        .visibility
        .then(|| check_visibility(&cfg.model, &fk, &cfg.t_init, &x, &cfg.intrinsics, &all, DEFAULT_GAMMA))
        .flatten()
    {
        Some(v) => prune_predictions(&all, &v),
        None => all.clone(),
    };
    let observations: Vec<Observation> =
        obs.iter().enumerate().map(|(index, o)| Observation { index, pixel: o.1 }).collect();
    let options = JcbbOptions { alpha: params.alpha, ..JcbbOptions::default() };
    let outcome =
        jcbb_with(&preds, &observations, &NoiseModel::gating_default(), &options).map_err(|e| e.to_string())?;
    let assigned: Vec<Option<Label>> = outcome.set.assignments.iter().map(|a| a.pred_label).collect();
    let truth: Vec<Option<Label>> = obs.iter().map(|o| o.0).collect();
    let score = score_association(&assigned, &truth);
    Ok(AssociateReport {
        image: [w, h],
        predictions: all
            .iter()
            .map(|p| PredictionView {
                label: p.label,
                u: p.pixel.u,
                v: p.pixel.v,
                kept: preds.iter().any(|k| k.label == p.label),
            })
            .collect(),
        observations: obs
            .iter()
            .zip(&assigned)
            .map(|((t, p), a)| ObservationView { u: p.u, v: p.v, truth: *t, assigned: *a, correct: t == a })
            .collect(),
        n_pair: outcome.set.n_pair,
        d2: outcome.set.d2,
        l: outcome.set.l,
        nodes: outcome.nodes,
        mismatched: score.mismatched,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeParams {
    pub seed: u64,
    pub frames: usize,
    pub estimators: Vec<EstimatorKind>,
    pub gating: GatingMode,
    pub visibility: bool,
    pub disturbance: Option<DisturbanceLevel>,
    pub scene: StockScene,
    pub particles: usize,
}

impl Default for ConvergeParams {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 300,
            estimators: vec![EstimatorKind::Ekf, EstimatorKind::Aekf],
            gating: GatingMode::State,
            visibility: true,
            disturbance: None,
            scene: StockScene::Sweep,
            particles: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub estimator: EstimatorKind,
    pub dt_mm: Vec<f64>,
    pub dr_rad: Vec<f64>,
    pub mismatched: Vec<usize>,
    pub matched: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergeReport {
    pub frames: usize,
    pub traces: Vec<Trace>,
}

pub fn converge(params: &ConvergeParams) -> Result<ConvergeReport, String> {
    if params.frames == 0 || params.frames > MAX_FRAMES {
        return Err(format!("frames must be in 1..={MAX_FRAMES}"));
    }
    let spec = SceneSpec {
        seed: params.seed,
        frame_count: params.frames,
        scene: params.scene,
        disturbance: params.disturbance.map(DisturbanceSchedule::new),
        ..SceneSpec::default()
    };
    let cfg = spec.build().map_err(|e| e.to_string())?;
    let frames = generate_scene(&cfg)
        .map_err(|e| e.to_string())?
        .collect::<calibkit::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let mut traces = Vec::new();
    for &estimator in &params.estimators {
        let mut config = PipelineConfig {
            estimator,
            gating_mode: params.gating,
            visibility: params.visibility,
            ..PipelineConfig::default()
        };
        config.filter.seed = params.seed;
        config.filter.particle_count = params.particles.max(1);
        config.filter.effective_threshold = config.filter.effective_threshold.min(config.filter.particle_count as f64);
        let initial = CalibrationState::new(Vec6::zeros(), default_initial_covariance());
        let mut pipeline =
            Pipeline::new(cfg.model.clone(), cfg.intrinsics, cfg.t_init, initial, config).map_err(|e| e.to_string())?;
        let mut trace =
            Trace { estimator, dt_mm: Vec::new(), dr_rad: Vec::new(), mismatched: Vec::new(), matched: Vec::new() };
        for f in &frames {
            if let Some(kick) = &f.kick {
                pipeline.kick(kick);
            }
            let r = pipeline.process(&f.q, &f.observations).map_err(|e| e.to_string())?;
            let (dt, dr) = state_error(&r.state.x, &f.truth);
            let score = score_association(&r.assigned, &f.labels);
            trace.dt_mm.push(dt);
            trace.dr_rad.push(dr);
            trace.mismatched.push(score.mismatched);
            trace.matched.push(score.matched);
        }
        traces.push(trace);
    }
    Ok(ConvergeReport { frames: frames.len(), traces })
}

fn run<P: for<'de> Deserialize<'de>, R: Serialize>(
    params: &str,
    f: impl Fn(&P) -> Result<R, String>,
) -> Result<String, String> {
    let p: P = if params.trim().is_empty() { serde_json::from_str("{}") } else { serde_json::from_str(params) }
        .map_err(|e| format!("bad parameters: {e}"))?;
    serde_json::to_string(&f(&p)?).map_err(|e| e.to_string())
}

pub fn instrument_view_json(params: &str) -> Result<String, String> {
    run(params, instrument_view)
}

pub fn associate_json(params: &str) -> Result<String, String> {
    run(params, associate)
}

pub fn converge_json(params: &str) -> Result<String, String> {
    run(params, converge)
}

#[wasm_bindgen(js_name = instrumentView)]
pub fn instrument_view_js(params: &str) -> Result<String, JsError> {
    instrument_view_json(params).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = associateFrame)]
pub fn associate_js(params: &str) -> Result<String, JsError> {
    associate_json(params).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = convergenceRun)]
pub fn converge_js(params: &str) -> Result<String, JsError> {
    converge_json(params).map_err(|e| JsError::new(&e))
}
