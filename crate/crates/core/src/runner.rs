//! Glue between frame streams, the pipeline and the report formats.

use serde::Serialize;

use crate::association::{build_candidate_lists, jcbb_with, Candidate, HypothesisSet, NoiseModel, Observation};
use crate::camera::PixelPoint;
use crate::estimators::predict_keypoints;
use crate::geometry::{forward_kinematics, CalibrationState, Label};
use crate::io::{InitMetadata, ReportRow, StreamFrame, StreamHeader, TraceRow};
use crate::pipeline::{default_initial_covariance, FrameResult, Pipeline, PipelineConfig};
use crate::pnp::{pnp_ransac, pose_to_state, Correspondence, RansacOptions};
use crate::simulator::{score_association, state_error};
use crate::visibility::{check_visibility, prune_predictions, VisibilityVerdict};
use crate::{Error, Result, Vec6};

/// Output of one processed frame.
#[derive(Debug, Clone)]
pub struct Step {
    pub row: ReportRow,
    pub trace: TraceRow,
    pub result: FrameResult,
}

/// Runs a pipeline over stream frames, applying estimate kicks and producing report rows.
pub struct Runner {
    pipeline: Pipeline,
    /// When false, time columns are written as zero so reports are byte-reproducible.
    timing: bool,
}

impl Runner {
    pub fn new(header: &StreamHeader, initial: CalibrationState, config: PipelineConfig, timing: bool) -> Result<Self> {
        let pipeline = Pipeline::new(header.model.clone(), header.intrinsics, header.t_init, initial, config)?;
        Ok(Self { pipeline, timing })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn step(&mut self, frame: &StreamFrame) -> Result<Step> {
        if let Some(kick) = &frame.kick {
            self.pipeline.kick(kick);
        }
        let result = self.pipeline.process(&frame.q, &frame.observations)?;
        let n_mismatched = frame.labels.as_ref().map(|l| score_association(&result.assigned, l).mismatched);
        let err = frame.truth.map(|t| state_error(&result.state.x, &t));
        let ms = |d: std::time::Duration| if self.timing { d.as_secs_f64() * 1e3 } else { 0.0 };
        let row = ReportRow {
            frame: frame.index,
            n_obs: frame.observations.len(),
            n_matched: result.hypotheses.n_pair,
            n_mismatched,
            d2: result.hypotheses.d2,
            l: result.hypotheses.l,
            dt_mm: err.map(|e| e.0),
            dr_rad: err.map(|e| e.1),
            assoc_time_ms: ms(result.assoc_time),
            filter_time_ms: ms(result.filter_time),
        };
        let trace = TraceRow { frame: frame.index, x: result.state.x, dt_mm: row.dt_mm, dr_rad: row.dr_rad };
        Ok(Step { row, trace, result })
    }
}

/// Initial hand-eye estimate from the first `n` frames by RANSAC PnP.
///
/// Correspondences come from the stream's labels. Without labels, each frame is associated
/// by JCBB at `x = 0` with the gating noise, and the resulting pairs are used instead.
pub fn initial_estimate(
    header: &StreamHeader,
    frames: &[StreamFrame],
    n: usize,
    ransac: &RansacOptions,
    gating: &NoiseModel,
    jcbb: &crate::association::JcbbOptions,
) -> Result<(CalibrationState, InitMetadata)> {
    let used = &frames[..n.min(frames.len())];
    let bootstrapped = used.iter().any(|f| f.labels.is_none());
    let mut corrs = Vec::new();
    for (fi, f) in used.iter().enumerate() {
        let fk = forward_kinematics(&header.model.chain, &f.q)?;
        let pairs: Vec<(usize, Label)> = match (&f.labels, bootstrapped) {
            (Some(labels), false) => labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).collect(),
            _ => {
                let preds = predict_keypoints(&Vec6::zeros(), &header.model, &f.q, &header.t_init, &header.intrinsics)?;
                let obs: Vec<Observation> =
                    f.observations.iter().enumerate().map(|(index, &pixel)| Observation { index, pixel }).collect();
                jcbb_with(&preds, &obs, gating, jcbb)?.set.pairs().collect()
            }
        };
        for (i, label) in pairs {
            let kp = header.model.keypoint(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
            corrs.push(Correspondence {
                p_r: fk[kp.joint_index].apply(&kp.local_position),
                pixel: f.observations[i],
                frame_index: fi,
            });
        }
    }
    let result = pnp_ransac(&corrs, &header.intrinsics, ransac)?;
    let (x, gimbal_lock) = pose_to_state(&result.pose, &header.t_init);
    let meta = InitMetadata {
        frames_used: used.len(),
        correspondences: corrs.len(),
        inliers: result.inlier_count(),
        mean_error_px: result.mean_error,
        bootstrapped,
        gimbal_lock,
    };
    Ok((CalibrationState::new(x, default_initial_covariance()), meta))
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionReport {
    pub label: Label,
    pub pixel: PixelPoint,
    pub kept: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssignmentReport {
    pub observation: usize,
    pub pixel: PixelPoint,
    pub label: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_label: Option<Option<Label>>,
}

/// Single-frame association diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct AssociationReport {
    pub frame: usize,
    pub state: [f64; 6],
    pub predictions: Vec<PredictionReport>,
    pub visibility: Option<VisibilityVerdict>,
    pub candidates: Vec<Vec<Candidate>>,
    pub assignments: Vec<AssignmentReport>,
    pub hypotheses: HypothesisSet,
    pub nodes: usize,
    pub exhausted: bool,
}

pub fn associate_frame(
    header: &StreamHeader,
    frame: &StreamFrame,
    state: &CalibrationState,
    config: &PipelineConfig,
) -> Result<AssociationReport> {
    let fk = forward_kinematics(&header.model.chain, &frame.q)?;
    let (t_init, k) = (&header.t_init, &header.intrinsics);
    let all = crate::estimators::predict_from_frames(&state.x, &header.model, &fk, t_init, k);
    let visibility = if config.visibility {
        check_visibility(&header.model, &fk, t_init, &state.x, k, &all, config.gamma)
    } else {
        None
    };
    let preds = match &visibility {
        Some(v) => prune_predictions(&all, v),
        None => all.clone(),
    };
    let mut gating = config.gating.clone();
    if config.gating_mode == crate::pipeline::GatingMode::State {
        gating.sigma_e = state.sigma_x + config.filter.noise.sigma_e;
    }
    let obs: Vec<Observation> =
        frame.observations.iter().enumerate().map(|(index, &pixel)| Observation { index, pixel }).collect();
    let outcome = jcbb_with(&preds, &obs, &gating, &config.jcbb)?;
    let candidates = build_candidate_lists(&preds, &obs, &gating, config.jcbb.alpha)?;
    let assignments = outcome
        .set
        .assignments
        .iter()
        .map(|h| AssignmentReport {
            observation: h.obs_index,
            pixel: frame.observations[h.obs_index],
            label: h.pred_label,
            true_label: frame.labels.as_ref().map(|l| l[h.obs_index]),
        })
        .collect();
    Ok(AssociationReport {
        frame: frame.index,
        state: state.x.into(),
        predictions: all
            .iter()
            .map(|p| PredictionReport { label: p.label, pixel: p.pixel, kept: preds.iter().any(|q| q.label == p.label) })
            .collect(),
        visibility,
        candidates,
        assignments,
        hypotheses: outcome.set,
        nodes: outcome.nodes,
        exhausted: outcome.exhausted,
    })
}
