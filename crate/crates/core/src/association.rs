//! Keypoint association: individual compatibility gating, joint compatibility and the joint
//! compatibility branch and bound (JCBB) search.
//!
//! An observation `i` paired with prediction `j` has innovation `h = obs_i - pred_j` and
//! covariance `C = H_j Σe H_jᵀ + Σv`. A set of `k` pairs is stacked into a `2k` innovation with
//! covariance `C = H_all Σe H_allᵀ + blockdiag(Σv)`; the pairs share one state, so the blocks
//! are correlated. The search maximizes the number of pairs and breaks ties by the negative log
//! matching likelihood `l = 2k log(2π) + D² + log det C`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use serde::Serialize;

use crate::camera::{Mat2x6, MeasurementJacobian, PixelPoint};
use crate::chi2::{chi2_quantile, Chi2Table};
use crate::geometry::Label;
use crate::{Mat6, Result};

/// Default confidence level of the chi-square gates.
pub const DEFAULT_ALPHA: f64 = 0.975;
/// Default JCBB node budget.
pub const DEFAULT_NODE_BUDGET: usize = 200_000;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;
const PD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub pixel: PixelPoint,
    pub p_r: Vector3<f64>,
    pub jacobian: MeasurementJacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observation {
    pub index: usize,
    pub pixel: PixelPoint,
}

/// One observation's assignment; `pred_label == None` is the trivial (outlier) hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Hypothesis {
    pub obs_index: usize,
    pub pred_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisSet {
    pub assignments: Vec<Hypothesis>,
    pub n_pair: usize,
    pub d2: f64,
    pub l: f64,
}

impl HypothesisSet {
    pub fn empty() -> Self {
        Self { assignments: Vec::new(), n_pair: 0, d2: 0.0, l: f64::INFINITY }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, Label)> + '_ {
        self.assignments.iter().filter_map(|h| h.pred_label.map(|l| (h.obs_index, l)))
    }
}

/// State and measurement covariances used for gating.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub sigma_e: Mat6,
    pub sigma_v: Matrix2<f64>,
    /// Per-keypoint measurement covariance overrides.
    pub sigma_v_overrides: BTreeMap<Label, Matrix2<f64>>,
}

impl NoiseModel {
    pub fn new(sigma_e: Mat6, sigma_v: Matrix2<f64>) -> Self {
        Self { sigma_e, sigma_v, sigma_v_overrides: BTreeMap::new() }
    }

    /// Gating covariances: Σe = diag{5,5,5,0.25,0.25,0.25}·1e-2, Σv = diag{50,50}.
    pub fn gating_default() -> Self {
        Self::new(
            Mat6::from_diagonal(&crate::Vec6::new(5.0, 5.0, 5.0, 0.25, 0.25, 0.25)) * 1e-2,
            Matrix2::from_diagonal(&Vector2::new(50.0, 50.0)),
        )
    }

    /// Filter covariances: Σe = diag{5,5,5,0.25,0.25,0.25}·1e-6, Σv = diag{25,25}.
    pub fn filter_default() -> Self {
        Self::new(
            Mat6::from_diagonal(&crate::Vec6::new(5.0, 5.0, 5.0, 0.25, 0.25, 0.25)) * 1e-6,
            Matrix2::from_diagonal(&Vector2::new(25.0, 25.0)),
        )
    }

    pub fn sigma_v_for(&self, label: Label) -> &Matrix2<f64> {
        self.sigma_v_overrides.get(&label).unwrap_or(&self.sigma_v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndividualCompatibility {
    pub d2: f64,
    pub compatible: bool,
}

pub fn innovation(obs: &Observation, pred: &Prediction) -> Vector2<f64> {
    obs.pixel.to_vector() - pred.pixel.to_vector()
}

/// Squared Mahalanobis distance of one pair and its chi-square(2) gate. A singular innovation
/// covariance is reported as incompatible with infinite distance.
pub fn individual_compatibility(
    obs: &Observation,
    pred: &Prediction,
    noise: &NoiseModel,
    alpha: f64,
) -> Result<IndividualCompatibility> {
    let gate = chi2_quantile(2, alpha)?;
    Ok(individual_with_gate(obs, pred, noise, gate))
}

fn individual_with_gate(obs: &Observation, pred: &Prediction, noise: &NoiseModel, gate: f64) -> IndividualCompatibility {
    let h = innovation(obs, pred);
    let hj = &pred.jacobian.h;
    let c = hj * noise.sigma_e * hj.transpose() + noise.sigma_v_for(pred.label);
    match c.cholesky() {
        Some(ch) => {
            let d2 = h.dot(&ch.solve(&h));
            IndividualCompatibility { d2, compatible: d2 < gate }
        }
        None => {
            log::debug!("singular innovation covariance for {}", pred.label);
            IndividualCompatibility { d2: f64::INFINITY, compatible: false }
        }
    }
}

/// An individually compatible prediction for one observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    /// Index into the prediction list.
    pub pred: usize,
    pub d2: f64,
}

/// For each observation, its individually compatible predictions in ascending `d2`.
pub fn build_candidate_lists(
    preds: &[Prediction],
    obs: &[Observation],
    noise: &NoiseModel,
    alpha: f64,
) -> Result<Vec<Vec<Candidate>>> {
    let gate = chi2_quantile(2, alpha)?;
    Ok(obs
        .iter()
        .map(|o| {
            let mut list: Vec<Candidate> = preds
                .iter()
                .enumerate()
                .filter_map(|(j, p)| {
                    let ic = individual_with_gate(o, p, noise, gate);
                    ic.compatible.then_some(Candidate { pred: j, d2: ic.d2 })
                })
                .collect();
            list.sort_by(|a, b| a.d2.total_cmp(&b.d2).then(a.pred.cmp(&b.pred)));
            list
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointCompatibility {
    pub d2: f64,
    pub l: f64,
    pub istrue: bool,
}

/// Joint compatibility of a hypothesis set. Labels in `set` are resolved against `preds`,
/// observation indices against `obs[..].index`.
///
/// An empty set is incompatible with `l = +inf`; a set of only trivial hypotheses is compatible
/// with `l = 0`.
pub fn joint_compatibility(
    set: &[Hypothesis],
    preds: &[Prediction],
    obs: &[Observation],
    noise: &NoiseModel,
    alpha: f64,
) -> Result<JointCompatibility> {
    if set.is_empty() {
        return Ok(JointCompatibility { d2: 0.0, l: f64::INFINITY, istrue: false });
    }
    let mut pairs = Vec::new();
    for h in set {
        let Some(label) = h.pred_label else { continue };
        let p = preds
            .iter()
            .find(|p| p.label == label)
            .ok_or_else(|| crate::Error::UnknownLabel(label.to_string()))?;
        let o = obs.iter().find(|o| o.index == h.obs_index).ok_or(crate::Error::DimensionMismatch {
            expected: obs.len(),
            got: h.obs_index,
        })?;
        pairs.push((o, p));
    }
    let k = pairs.len();
    if k == 0 {
        return Ok(JointCompatibility { d2: 0.0, l: 0.0, istrue: true });
    }
    let n = 2 * k;
    let mut h_all = DMatrix::<f64>::zeros(n, 6);
    let mut inn = DVector::<f64>::zeros(n);
    let mut sv = DMatrix::<f64>::zeros(n, n);
    for (r, (o, p)) in pairs.iter().enumerate() {
        h_all.view_mut((2 * r, 0), (2, 6)).copy_from(&p.jacobian.h);
        inn.rows_mut(2 * r, 2).copy_from(&innovation(o, p));
        sv.view_mut((2 * r, 2 * r), (2, 2)).copy_from(noise.sigma_v_for(p.label));
    }
    let se = DMatrix::from_iterator(6, 6, noise.sigma_e.iter().copied());
    let c = &h_all * se * h_all.transpose() + sv;
    let Some(ch) = c.cholesky() else {
        log::debug!("joint innovation covariance is not positive definite ({k} pairs)");
        return Ok(JointCompatibility { d2: f64::INFINITY, l: f64::INFINITY, istrue: false });
    };
    let d2 = inn.dot(&ch.solve(&inn));
    let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let l = n as f64 * LOG_2PI + d2 + log_det;
    Ok(JointCompatibility { d2, l, istrue: d2 < chi2_quantile(n, alpha)? })
}

/// Incrementally factored joint innovation covariance for a growing pair stack.
///
/// Appending a pair extends the lower Cholesky factor by two rows, so the joint distance and
/// log-determinant of every prefix are available in O((2k)²) per push.
#[derive(Debug, Clone)]
struct JointAccumulator {
    sigma_e: Mat6,
    /// `H_i Σe` per pair.
    weighted: Vec<Mat2x6>,
    jac: Vec<Mat2x6>,
    /// Row-major lower-triangular rows; row `r` has `r + 1` entries.
    l_rows: Vec<Vec<f64>>,
    z: Vec<f64>,
    d2: Vec<f64>,
    log_det: Vec<f64>,
}

impl JointAccumulator {
    fn new(sigma_e: Mat6) -> Self {
        Self {
            sigma_e,
            weighted: Vec::new(),
            jac: Vec::new(),
            l_rows: Vec::new(),
            z: Vec::new(),
            d2: vec![0.0],
            log_det: vec![0.0],
        }
    }

    fn pairs(&self) -> usize {
        self.jac.len()
    }

    fn d2(&self) -> f64 {
        *self.d2.last().unwrap()
    }

    fn l(&self) -> f64 {
        let k = self.pairs();
        if k == 0 {
            return 0.0;
        }
        2.0 * k as f64 * LOG_2PI + self.d2() + self.log_det.last().unwrap()
    }

    /// Returns false (and leaves the stack unchanged) if the extended covariance is not
    /// positive definite.
    fn push(&mut self, h: &Vector2<f64>, jac: &Mat2x6, sigma_v: &Matrix2<f64>) -> bool {
        let base = self.l_rows.len();
        let w = jac * self.sigma_e;
        // New covariance rows: [w · H_oldᵀ, w · H_newᵀ + Σv].
        let mut rows: [Vec<f64>; 2] = [Vec::with_capacity(base + 2), Vec::with_capacity(base + 2)];
        for (r, row) in rows.iter_mut().enumerate() {
            for old in &self.jac {
                let cross = w.row(r) * old.transpose();
                row.push(cross[0]);
                row.push(cross[1]);
            }
            let own = w.row(r) * jac.transpose();
            row.push(own[0] + sigma_v[(r, 0)]);
            row.push(own[1] + sigma_v[(r, 1)]);
        }
        let mut new_l: [Vec<f64>; 2] = [vec![0.0; base + 1], vec![0.0; base + 2]];
        let mut new_z = [0.0; 2];
        let mut d2 = self.d2();
        let mut log_det = *self.log_det.last().unwrap();
        for r in 0..2 {
            let n = base + r;
            for j in 0..n {
                let lj: &[f64] = if j < base { &self.l_rows[j] } else { &new_l[j - base] };
                let mut s = rows[r][j];
                for p in 0..j {
                    s -= new_l[r][p] * lj[p];
                }
                new_l[r][j] = s / lj[j];
            }
            let mut diag = rows[r][n];
            for p in 0..n {
                diag -= new_l[r][p] * new_l[r][p];
            }
            if !(diag > PD_EPS * rows[r][n].abs().max(1.0)) {
                return false;
            }
            let lnn = diag.sqrt();
            new_l[r][n] = lnn;
            let mut s = h[r];
            for p in 0..n {
                let zp = if p < base { self.z[p] } else { new_z[p - base] };
                s -= new_l[r][p] * zp;
            }
            new_z[r] = s / lnn;
            d2 += new_z[r] * new_z[r];
            log_det += 2.0 * lnn.ln();
        }
        let [l0, l1] = new_l;
        self.l_rows.push(l0);
        self.l_rows.push(l1);
        self.z.extend_from_slice(&new_z);
        self.d2.push(d2);
        self.log_det.push(log_det);
        self.weighted.push(w);
        self.jac.push(*jac);
        true
    }

    fn pop(&mut self) {
        self.l_rows.truncate(self.l_rows.len() - 2);
        self.z.truncate(self.z.len() - 2);
        self.d2.pop();
        self.log_det.pop();
        self.weighted.pop();
        self.jac.pop();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JcbbOptions {
    pub alpha: f64,
    pub node_budget: usize,
    /// Disables both the pair-count bound and the joint-distance bound (used to verify that
    /// pruning never discards the optimum).
    pub prune: bool,
}

impl Default for JcbbOptions {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, node_budget: DEFAULT_NODE_BUDGET, prune: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JcbbOutcome {
    pub set: HypothesisSet,
    pub candidates: Vec<Vec<Candidate>>,
    pub nodes: usize,
    /// The node budget ran out; `set` is the best assignment found before that.
    pub exhausted: bool,
}

pub fn jcbb(preds: &[Prediction], obs: &[Observation], noise: &NoiseModel, alpha: f64) -> Result<HypothesisSet> {
    Ok(jcbb_with(preds, obs, noise, &JcbbOptions { alpha, ..JcbbOptions::default() })?.set)
}

pub fn jcbb_with(
    preds: &[Prediction],
    obs: &[Observation],
    noise: &NoiseModel,
    options: &JcbbOptions,
) -> Result<JcbbOutcome> {
    let candidates = build_candidate_lists(preds, obs, noise, options.alpha)?;
    if obs.is_empty() {
        return Ok(JcbbOutcome { set: HypothesisSet::empty(), candidates, nodes: 0, exhausted: false });
    }
    let chi2 = Chi2Table::new(options.alpha, obs.len().min(preds.len()))?;
    let innovations: Vec<Vec<Vector2<f64>>> = candidates
        .iter()
        .zip(obs)
        .map(|(list, o)| list.iter().map(|c| innovation(o, &preds[c.pred])).collect())
        .collect();
    let mut search = Search {
        preds,
        noise,
        candidates: &candidates,
        innovations: &innovations,
        chi2: &chi2,
        prune: options.prune,
        budget: options.node_budget,
        nodes: 0,
        exhausted: false,
        used: vec![false; preds.len()],
        current: Vec::with_capacity(obs.len()),
        acc: JointAccumulator::new(noise.sigma_e),
        best: None,
    };
    search.descend(0);
    let (nodes, exhausted) = (search.nodes, search.exhausted);
    let set = match search.best {
        Some(best) => HypothesisSet {
            assignments: best
                .assignment
                .iter()
                .zip(obs)
                .map(|(a, o)| Hypothesis { obs_index: o.index, pred_label: a.map(|j| preds[j].label) })
                .collect(),
            n_pair: best.n_pair,
            d2: best.d2,
            l: best.l,
        },
        // Only reachable with a zero node budget.
        None => HypothesisSet {
            assignments: obs.iter().map(|o| Hypothesis { obs_index: o.index, pred_label: None }).collect(),
            n_pair: 0,
            d2: 0.0,
            l: 0.0,
        },
    };
    if exhausted {
        log::warn!("JCBB node budget of {} exhausted; returning incumbent with {} pairs", options.node_budget, set.n_pair);
    }
    Ok(JcbbOutcome { set, candidates, nodes, exhausted })
}

struct Incumbent {
    assignment: Vec<Option<usize>>,
    n_pair: usize,
    d2: f64,
    l: f64,
}

struct Search<'a> {
    preds: &'a [Prediction],
    noise: &'a NoiseModel,
    candidates: &'a [Vec<Candidate>],
    innovations: &'a [Vec<Vector2<f64>>],
    chi2: &'a Chi2Table,
    prune: bool,
    budget: usize,
    nodes: usize,
    exhausted: bool,
    used: Vec<bool>,
    current: Vec<Option<usize>>,
    acc: JointAccumulator,
    best: Option<Incumbent>,
}

impl Search<'_> {
    fn best_pairs(&self) -> usize {
        self.best.as_ref().map_or(0, |b| b.n_pair)
    }

    /// Observations after `from` that still have an unused candidate.
    fn max_remaining_pairs(&self, from: usize) -> usize {
        self.candidates[from..]
            .iter()
            .filter(|list| list.iter().any(|c| !self.used[c.pred]))
            .count()
    }

    fn descend(&mut self, i: usize) {
        if self.nodes >= self.budget {
            self.exhausted = true;
            return;
        }
        self.nodes += 1;
        if i == self.candidates.len() {
            self.evaluate_leaf();
            return;
        }
        let k_p = self.acc.pairs();
        for (ci, cand) in self.candidates[i].iter().enumerate() {
            if self.used[cand.pred] {
                continue;
            }
            self.used[cand.pred] = true;
            let bound = k_p + 1 + self.max_remaining_pairs(i + 1);
            if self.prune && bound < self.best_pairs() {
                self.used[cand.pred] = false;
                continue;
            }
            let pred = &self.preds[cand.pred];
            if self.acc.push(&self.innovations[i][ci], &pred.jacobian.h, self.noise.sigma_v_for(pred.label)) {
                // Any completion has D² at least the current value and at most `bound` pairs.
                if !self.prune || self.acc.d2() < self.chi2.for_pairs(bound) {
                    self.current.push(Some(cand.pred));
                    self.descend(i + 1);
                    self.current.pop();
                }
                self.acc.pop();
            }
            self.used[cand.pred] = false;
            if self.exhausted {
                return;
            }
        }
        let bound = k_p + self.max_remaining_pairs(i + 1);
        if !self.prune || bound >= self.best_pairs() {
            self.current.push(None);
            self.descend(i + 1);
            self.current.pop();
        }
    }

    fn evaluate_leaf(&mut self) {
        let k = self.acc.pairs();
        let d2 = self.acc.d2();
        if k > 0 && !(d2 < self.chi2.for_pairs(k)) {
            return;
        }
        let l = self.acc.l();
        let better = match &self.best {
            None => true,
            Some(b) => k > b.n_pair || (k == b.n_pair && l < b.l),
        };
        if better {
            self.best = Some(Incumbent { assignment: self.current.clone(), n_pair: k, d2, l });
        }
    }
}
