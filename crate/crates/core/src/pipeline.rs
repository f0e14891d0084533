//! Per-frame processing: predict keypoints, prune invisible sides, associate with JCBB and
//! update the estimator.

use std::borrow::Cow;
use std::time::Duration;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::association::{jcbb_with, HypothesisSet, JcbbOptions, NoiseModel, Observation};
use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::estimators::{predict_from_frames, Filter, FilterConfig, FilterOutput, MatchedPair, MeasurementContext};
use crate::geometry::{forward_kinematics, CalibrationState, InstrumentModel, Label, Transform};
use crate::pnp::{pose_to_state, Correspondence, IncrementalPnp, RansacOptions};
use crate::visibility::{check_visibility, prune_predictions, VisibilityVerdict, DEFAULT_GAMMA};
use crate::{Mat6, Result, Vec6};

/// Wall-clock timer; reads zero on targets without a monotonic clock.
#[derive(Clone, Copy)]
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed(&self) -> Duration {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed();
        #[cfg(target_arch = "wasm32")]
        Duration::ZERO
    }
}

/// Initial state covariance used when none is given: the gating state covariance.
pub fn default_initial_covariance() -> Mat6 {
    NoiseModel::gating_default().sigma_e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ekf,
    Aekf,
    Pf,
    /// Incremental PnP over all associated pairs seen so far.
    Pnp,
}

/// Which state covariance JCBB gates with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    /// The fixed `gating.sigma_e`.
    #[default]
    Fixed,
    /// The estimator's predicted covariance `Σx + Σe(filter)`, as in conventional JCBB.
    State,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub estimator: EstimatorKind,
    pub filter: FilterConfig,
    pub gating: NoiseModel,
    pub jcbb: JcbbOptions,
    pub visibility: bool,
    pub gamma: f64,
    pub ransac: RansacOptions,
    pub gating_mode: GatingMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Ekf,
            filter: FilterConfig::default(),
            gating: NoiseModel::gating_default(),
            jcbb: JcbbOptions::default(),
            visibility: true,
            gamma: DEFAULT_GAMMA,
            ransac: RansacOptions::default(),
            gating_mode: GatingMode::Fixed,
        }
    }
}

#[derive(Debug, Clone)]
enum Estimator {
    Filter(Filter),
    Pnp { solver: IncrementalPnp, state: CalibrationState, frame: usize },
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub predictions_total: usize,
    pub predictions_kept: usize,
    pub verdict: Option<VisibilityVerdict>,
    pub hypotheses: HypothesisSet,
    /// Assigned label per input observation.
    pub assigned: Vec<Option<Label>>,
    pub jcbb_nodes: usize,
    pub jcbb_exhausted: bool,
    pub innovations: Vec<Vector2<f64>>,
    pub state: CalibrationState,
    pub assoc_time: Duration,
    pub filter_time: Duration,
}

pub struct Pipeline {
    model: InstrumentModel,
    ctx: MeasurementContext,
    config: PipelineConfig,
    estimator: Estimator,
}

impl Pipeline {
    pub fn new(
        model: InstrumentModel,
        k: CameraIntrinsics,
        t_init: Transform,
        initial: CalibrationState,
        config: PipelineConfig,
    ) -> Result<Self> {
        k.validate()?;
        let mut filter_config = config.filter.clone();
        filter_config.kind = match config.estimator {
            EstimatorKind::Ekf | EstimatorKind::Pnp => crate::estimators::FilterKind::Ekf,
            EstimatorKind::Aekf => crate::estimators::FilterKind::Aekf,
            EstimatorKind::Pf => crate::estimators::FilterKind::Pf,
        };
        let estimator = match config.estimator {
            EstimatorKind::Pnp => Estimator::Pnp { solver: IncrementalPnp::new(config.ransac), state: initial, frame: 0 },
            _ => Estimator::Filter(Filter::new(filter_config, initial)?),
        };
        Ok(Self { model, ctx: MeasurementContext { t_init, k }, config, estimator })
    }

    pub fn state(&self) -> CalibrationState {
        match &self.estimator {
            Estimator::Filter(f) => *f.state(),
            Estimator::Pnp { state, .. } => *state,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Adds `dx` to the current estimate.
    pub fn kick(&mut self, dx: &Vec6) {
        match &mut self.estimator {
            Estimator::Filter(f) => {
                let mut s = *f.state();
                s.x += dx;
                f.set_state(s);
            }
            Estimator::Pnp { state, .. } => state.x += dx,
        }
    }

    pub fn process(&mut self, q: &[f64], observations: &[PixelPoint]) -> Result<FrameResult> {
        let frames = forward_kinematics(&self.model.chain, q)?;
        let state = self.state();

        let assoc_start = Stopwatch::start();
        let all = predict_from_frames(&state.x, &self.model, &frames, &self.ctx.t_init, &self.ctx.k);
        let verdict = if self.config.visibility {
            check_visibility(&self.model, &frames, &self.ctx.t_init, &state.x, &self.ctx.k, &all, self.config.gamma)
        } else {
            None
        };
        let preds = match &verdict {
            Some(v) => prune_predictions(&all, v),
            None => all.clone(),
        };
        let obs: Vec<Observation> =
            observations.iter().enumerate().map(|(index, &pixel)| Observation { index, pixel }).collect();
        let gating = match self.config.gating_mode {
            GatingMode::Fixed => Cow::Borrowed(&self.config.gating),
            GatingMode::State => {
                let mut g = self.config.gating.clone();
                g.sigma_e = state.sigma_x + self.config.filter.noise.sigma_e;
                Cow::Owned(g)
            }
        };
        let outcome = jcbb_with(&preds, &obs, &gating, &self.config.jcbb)?;
        let assoc_time = assoc_start.elapsed();

        let mut assigned = vec![None; observations.len()];
        let mut matches = Vec::with_capacity(outcome.set.n_pair);
        for (i, label) in outcome.set.pairs() {
            assigned[i] = Some(label);
            let pred = preds.iter().find(|p| p.label == label).expect("assigned labels come from predictions");
            matches.push(MatchedPair::new(pred, observations[i]));
        }

        let filter_start = Stopwatch::start();
        let (state, innovations) = match &mut self.estimator {
            Estimator::Filter(f) => {
                let FilterOutput { state, innovations, .. } = f.update(&matches, &self.ctx);
                (state, innovations)
            }
            Estimator::Pnp { solver, state, frame } => {
                let corrs: Vec<Correspondence> = matches
                    .iter()
                    .map(|m| Correspondence { p_r: m.p_r, pixel: m.observation, frame_index: *frame })
                    .collect();
                solver.add_frame(&corrs);
                *frame += 1;
                if solver.pool_size() >= crate::pnp::MIN_SAMPLE {
                    match solver.solve(&self.ctx.k) {
                        Ok(r) => state.x = pose_to_state(&r.pose, &self.ctx.t_init).0,
                        Err(e) => log::debug!("incremental pnp: {e}"),
                    }
                }
                let inn = matches.iter().map(|m| m.innovation).collect();
                (*state, inn)
            }
        };
        let filter_time = filter_start.elapsed();

        Ok(FrameResult {
            predictions_total: all.len(),
            predictions_kept: preds.len(),
            verdict,
            hypotheses: outcome.set,
            assigned,
            jcbb_nodes: outcome.nodes,
            jcbb_exhausted: outcome.exhausted,
            innovations,
            state,
            assoc_time,
            filter_time,
        })
    }
}
