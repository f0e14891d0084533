//! File formats used by the `calib` tool.
//!
//! * Frame stream (JSONL): one header object, then one object per frame
//!   `{"t", "q": [...], "obs": [[u, v], ...]}` with optional `labels`, `truth` and `kick`.
//! * Run configuration (JSON) with `filter`, `association`, `visibility`, `ransac`, `scene`
//!   and `init_frames` sections; every field has a default.
//! * Initial state (JSON) `{"x": [6], "sigma_x": [[6]; 6]}`.
//! * Run report (CSV), state trace (CSV) and run summary (JSON).
//!
//! Reports start with a `# calibkit-<kind> v<version>` line. A run that fails part-way ends
//! its report with a `# error: <message>` line.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix4, SMatrix};
use serde::{Deserialize, Serialize};

use crate::association::{JcbbOptions, NoiseModel, DEFAULT_ALPHA, DEFAULT_NODE_BUDGET};
use crate::camera::{CameraIntrinsics, PixelPoint};
use crate::estimators::FilterConfig;
use crate::geometry::{CalibrationState, InstrumentModel, Label, Transform};
use crate::pipeline::{default_initial_covariance, EstimatorKind, GatingMode, PipelineConfig};
use crate::pnp::RansacOptions;
use crate::simulator::{FrameRecord, SceneConfig, SceneSpec};
use crate::visibility::DEFAULT_GAMMA;
use crate::{Error, Result, Vec6};

pub const FRAME_FORMAT: &str = "calibkit-frames";
pub const FRAME_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

pub const REPORT_COLUMNS: [&str; 10] = [
    "frame",
    "n_obs",
    "n_matched",
    "n_mismatched",
    "d2",
    "l",
    "dt_mm",
    "dr_rad",
    "assoc_time_ms",
    "filter_time_ms",
];

pub const TRACE_COLUMNS: [&str; 9] = ["frame", "alpha", "beta", "gamma", "tx", "ty", "tz", "dt_mm", "dr_rad"];

const ERROR_MARKER: &str = "# error: ";

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema { line, message: message.into() }
}

// ---------------------------------------------------------------------------------------------
// Frame stream

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub length: String,
    pub angle: String,
    pub pixel: String,
}

impl Default for Units {
    fn default() -> Self {
        Self { length: "m".into(), angle: "rad".into(), pixel: "px".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    format: String,
    version: u32,
    units: Units,
    intrinsics: CameraIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<[f64; 2]>,
    /// Row-major 4×4 homogeneous matrix.
    t_init: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_path: Option<String>,
    joint_count: usize,
}

/// Resolved stream header.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub intrinsics: CameraIntrinsics,
    pub image_size: Option<(f64, f64)>,
    pub t_init: Transform,
    pub model: InstrumentModel,
    /// Where the model came from when it was not inline; written back as `model_path`.
    pub model_path: Option<String>,
}

impl StreamHeader {
    pub fn from_scene(config: &SceneConfig) -> Self {
        Self {
            intrinsics: config.intrinsics,
            image_size: Some(config.image_size),
            t_init: config.t_init,
            model: config.model.clone(),
            model_path: None,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.model.chain.joint_count()
    }
}

/// One frame of a stream. `labels`, `truth` and `kick` are present only in simulator output.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    pub index: usize,
    pub t: f64,
    pub q: Vec<f64>,
    pub observations: Vec<PixelPoint>,
    pub labels: Option<Vec<Option<Label>>>,
    pub truth: Option<Vec6>,
    pub kick: Option<Vec6>,
}

impl From<FrameRecord> for StreamFrame {
    fn from(r: FrameRecord) -> Self {
        Self {
            index: r.index,
            t: r.t,
            q: r.q,
            observations: r.observations,
            labels: Some(r.labels),
            truth: Some(r.truth),
            kick: r.kick,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    t: f64,
    q: Vec<f64>,
    obs: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<Option<Label>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kick: Option<[f64; 6]>,
}

fn transform_to_rows(t: &Transform) -> [[f64; 4]; 4] {
    let m = t.to_homogeneous();
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn transform_from_rows(rows: &[[f64; 4]; 4], line: usize) -> Result<Transform> {
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(schema(line, "t_init has non-finite entries"));
    }
    if m.fixed_view::<1, 4>(3, 0).transpose() != nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0) {
        return Err(schema(line, "t_init bottom row must be [0, 0, 0, 1]"));
    }
    let t = Transform::from_homogeneous(&m);
    if t.orthonormality_error() > 1e-6 {
        return Err(schema(line, "t_init rotation is not orthonormal"));
    }
    Ok(t)
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Writes a frame stream one line at a time.
pub struct FrameWriter<W: Write> {
    out: W,
    joint_count: usize,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(mut out: W, header: &StreamHeader) -> Result<Self> {
        let line = HeaderLine {
            format: FRAME_FORMAT.into(),
            version: FRAME_VERSION,
            units: Units::default(),
            intrinsics: header.intrinsics,
            image_size: header.image_size.map(|(w, h)| [w, h]),
            t_init: transform_to_rows(&header.t_init),
            model: header.model_path.is_none().then(|| header.model.to_json_value()),
            model_path: header.model_path.clone(),
            joint_count: header.joint_count(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
        Ok(Self { out, joint_count: header.joint_count() })
    }

    pub fn write_frame(&mut self, frame: &StreamFrame) -> Result<()> {
        if frame.q.len() != self.joint_count {
            return Err(Error::DimensionMismatch { expected: self.joint_count, got: frame.q.len() });
        }
        let line = FrameLine {
            t: frame.t,
            q: frame.q.clone(),
            obs: frame.observations.iter().map(|p| [p.u, p.v]).collect(),
            labels: frame.labels.clone(),
            truth: frame.truth.map(|x| x.into()),
            kick: frame.kick.map(|x| x.into()),
        };
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader: parses the header eagerly and frames lazily, in order.
pub struct FrameReader<R: BufRead> {
    lines: std::io::Lines<R>,
    header: StreamHeader,
    line_no: usize,
    index: usize,
}

impl<R: BufRead> FrameReader<R> {
    /// `base_dir` resolves a relative `model_path`.
    pub fn new(input: R, base_dir: Option<&Path>) -> Result<Self> {
        let mut lines = input.lines();
        let mut line_no = 0;
        let text = loop {
            line_no += 1;
            match lines.next() {
                None => return Err(schema(line_no, "missing header")),
                Some(l) => {
                    let l = l?;
                    if !l.trim().is_empty() {
                        break l;
                    }
                }
            }
        };
        let header = parse_header(&text, line_no, base_dir)?;
        Ok(Self { lines, header, line_no, index: 0 })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn parse_frame(&self, text: &str) -> Result<StreamFrame> {
        let line = self.line_no;
        let f: FrameLine = serde_json::from_str(text).map_err(|e| schema(line, e.to_string()))?;
        let joints = self.header.joint_count();
        if f.q.len() != joints {
            return Err(schema(line, format!("q has {} entries, model has {joints} joints", f.q.len())));
        }
        if !f.t.is_finite() || !all_finite(&f.q) || !f.obs.iter().all(|o| all_finite(o)) {
            return Err(schema(line, "non-finite number"));
        }
        if let Some(labels) = &f.labels {
            if labels.len() != f.obs.len() {
                return Err(schema(line, format!("{} labels for {} observations", labels.len(), f.obs.len())));
            }
            if let Some(l) = labels.iter().flatten().find(|l| self.header.model.keypoint(**l).is_none()) {
                return Err(schema(line, format!("label {l} is not in the model")));
            }
        }
        for v in [&f.truth, &f.kick].into_iter().flatten() {
            if !all_finite(v) {
                return Err(schema(line, "non-finite state"));
            }
        }
        Ok(StreamFrame {
            index: self.index,
            t: f.t,
            q: f.q,
            observations: f.obs.iter().map(|o| PixelPoint::new(o[0], o[1])).collect(),
            labels: f.labels,
            truth: f.truth.map(Vec6::from),
            kick: f.kick.map(Vec6::from),
        })
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<StreamFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            if text.trim().is_empty() {
                continue;
            }
            let frame = self.parse_frame(&text);
            if frame.is_ok() {
                self.index += 1;
            }
            return Some(frame);
        }
    }
}

fn parse_header(text: &str, line: usize, base_dir: Option<&Path>) -> Result<StreamHeader> {
    let h: HeaderLine = serde_json::from_str(text).map_err(|e| schema(line, format!("header: {e}")))?;
    if h.format != FRAME_FORMAT {
        return Err(schema(line, format!("unknown format {:?}", h.format)));
    }
    if h.version != FRAME_VERSION {
        return Err(schema(line, format!("unsupported version {}", h.version)));
    }
    if h.units != Units::default() {
        return Err(schema(line, "units must be m / rad / px"));
    }
    let intrinsics = CameraIntrinsics::new(h.intrinsics.fx, h.intrinsics.fy, h.intrinsics.cx, h.intrinsics.cy)
        .map_err(|e| schema(line, e.to_string()))?;
    let t_init = transform_from_rows(&h.t_init, line)?;
    let model = match (&h.model, &h.model_path) {
        (Some(v), None) => InstrumentModel::from_json_str(&v.to_string()).map_err(|e| schema(line, e.to_string()))?,
        (None, Some(p)) => {
            let path = resolve(base_dir, p);
            let s = std::fs::read_to_string(&path)
                .map_err(|e| schema(line, format!("model_path {}: {e}", path.display())))?;
            InstrumentModel::from_json_str(&s).map_err(|e| schema(line, e.to_string()))?
        }
        _ => return Err(schema(line, "exactly one of model and model_path is required")),
    };
    if model.chain.joint_count() != h.joint_count {
        return Err(schema(
            line,
            format!("joint_count {} but model has {} joints", h.joint_count, model.chain.joint_count()),
        ));
    }
    Ok(StreamHeader {
        intrinsics,
        image_size: h.image_size.map(|[w, ht]| (w, ht)),
        t_init,
        model,
        model_path: h.model_path,
    })
}

fn resolve(base_dir: Option<&Path>, p: &str) -> PathBuf {
    match base_dir {
        Some(dir) if Path::new(p).is_relative() => dir.join(p),
        _ => PathBuf::from(p),
    }
}

/// Reads a whole stream file.
pub fn read_frame_stream(path: &Path) -> Result<(StreamHeader, Vec<StreamFrame>)> {
    let file = std::fs::File::open(path)?;
    let reader = FrameReader::new(std::io::BufReader::new(file), path.parent())?;
    let header = reader.header().clone();
    let frames = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, frames))
}

// ---------------------------------------------------------------------------------------------
// Configuration

/// A covariance given either as its diagonal or as a full row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl CovarianceSpec {
    pub fn to_matrix<const N: usize>(&self) -> Result<SMatrix<f64, N, N>> {
        let m = match self {
            CovarianceSpec::Diagonal(d) => {
                if d.len() != N {
                    return Err(Error::DimensionMismatch { expected: N, got: d.len() });
                }
                SMatrix::<f64, N, N>::from_fn(|r, c| if r == c { d[r] } else { 0.0 })
            }
            CovarianceSpec::Full(rows) => {
                if rows.len() != N || rows.iter().any(|r| r.len() != N) {
                    return Err(Error::InvalidConfig(format!("covariance must be {N}×{N}")));
                }
                SMatrix::<f64, N, N>::from_fn(|r, c| rows[r][c])
            }
        };
        if !all_finite(m.as_slice()) {
            return Err(Error::InvalidConfig("covariance has non-finite entries".into()));
        }
        if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::InvalidConfig("covariance is not symmetric".into()));
        }
        if nalgebra::DMatrix::from_column_slice(N, N, m.as_slice()).symmetric_eigenvalues().iter().any(|&e| e < -1e-12) {
            return Err(Error::InvalidConfig("covariance is not positive semidefinite".into()));
        }
        Ok(m)
    }

    pub fn full<const N: usize>(m: &SMatrix<f64, N, N>) -> Self {
        CovarianceSpec::Full((0..N).map(|r| (0..N).map(|c| m[(r, c)]).collect()).collect())
    }
}

fn diag(v: &[f64], scale: f64) -> CovarianceSpec {
    CovarianceSpec::Diagonal(v.iter().map(|x| x * scale).collect())
}

const SIGMA_E_DIAG: [f64; 6] = [5.0, 5.0, 5.0, 0.25, 0.25, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub kind: EstimatorKind,
    pub sigma_e: CovarianceSpec,
    pub sigma_v: CovarianceSpec,
    pub forget_factor: f64,
    pub particle_count: usize,
    pub effective_threshold: f64,
    pub seed: u64,
    pub pf_adapt_cov: bool,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            kind: EstimatorKind::Ekf,
            sigma_e: diag(&SIGMA_E_DIAG, 1e-6),
            sigma_v: diag(&[25.0, 25.0], 1.0),
            forget_factor: f.forget_factor,
            particle_count: f.particle_count,
            effective_threshold: f.effective_threshold,
            seed: f.seed,
            pf_adapt_cov: f.pf_adapt_cov,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationSection {
    pub alpha: f64,
    pub sigma_e: CovarianceSpec,
    pub sigma_v: CovarianceSpec,
    pub node_budget: usize,
    pub gating: GatingMode,
}

impl Default for AssociationSection {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            sigma_e: diag(&SIGMA_E_DIAG, 1e-2),
            sigma_v: diag(&[50.0, 50.0], 1.0),
            node_budget: DEFAULT_NODE_BUDGET,
            gating: GatingMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisibilitySection {
    pub enabled: bool,
    pub gamma: f64,
}

impl Default for VisibilitySection {
    fn default() -> Self {
        Self { enabled: true, gamma: DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub filter: FilterSection,
    pub association: AssociationSection,
    pub visibility: VisibilitySection,
    pub ransac: RansacOptions,
    /// Frames consumed by `calib init`.
    pub init_frames: usize,
    pub scene: SceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            filter: FilterSection::default(),
            association: AssociationSection::default(),
            visibility: VisibilitySection::default(),
            ransac: RansacOptions::default(),
            init_frames: 100,
            scene: SceneSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.pipeline_config()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let f = &self.filter;
        let filter = FilterConfig {
            noise: NoiseModel::new(f.sigma_e.to_matrix::<6>()?, f.sigma_v.to_matrix::<2>()?),
            forget_factor: f.forget_factor,
            particle_count: f.particle_count,
            effective_threshold: f.effective_threshold,
            seed: f.seed,
            pf_adapt_cov: f.pf_adapt_cov,
            ..FilterConfig::default()
        };
        filter.validate()?;
        let a = &self.association;
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("association.alpha must be in (0, 1), got {}", a.alpha)));
        }
        let gating: Matrix2<f64> = a.sigma_v.to_matrix::<2>()?;
        if !(self.visibility.gamma > 0.0) {
            return Err(Error::InvalidConfig("visibility.gamma must be positive".into()));
        }
        if !(self.ransac.inlier_threshold_px > 0.0) || self.ransac.iterations == 0 {
            return Err(Error::InvalidConfig("ransac needs positive iterations and threshold".into()));
        }
        Ok(PipelineConfig {
            estimator: f.kind,
            filter,
            gating: NoiseModel::new(a.sigma_e.to_matrix::<6>()?, gating),
            jcbb: JcbbOptions { alpha: a.alpha, node_budget: a.node_budget, prune: true },
            visibility: self.visibility.enabled,
            gamma: self.visibility.gamma,
            ransac: self.ransac,
            gating_mode: a.gating,
        })
    }
}

// ---------------------------------------------------------------------------------------------
// Initial state

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitMetadata {
    pub frames_used: usize,
    pub correspondences: usize,
    pub inliers: usize,
    pub mean_error_px: f64,
    /// Correspondences came from JCBB at `x = 0` rather than from stream labels.
    pub bootstrapped: bool,
    /// The recovered pose was close to the Euler singularity.
    pub gimbal_lock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateFile {
    pub x: [f64; 6],
    pub sigma_x: CovarianceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitMetadata>,
}

impl InitialStateFile {
    pub fn new(state: &CalibrationState, init: Option<InitMetadata>) -> Self {
        Self { x: state.x.into(), sigma_x: CovarianceSpec::full(&state.sigma_x), init }
    }

    pub fn state(&self) -> Result<CalibrationState> {
        if !all_finite(&self.x) {
            return Err(Error::InvalidConfig("initial x has non-finite entries".into()));
        }
        Ok(CalibrationState::new(Vec6::from(self.x), self.sigma_x.to_matrix::<6>()?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.state()?;
        Ok(s)
    }
}

/// `x = 0` with the default initial covariance.
pub fn zero_state() -> CalibrationState {
    CalibrationState::new(Vec6::zeros(), default_initial_covariance())
}

// ---------------------------------------------------------------------------------------------
// Run report

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub frame: usize,
    pub n_obs: usize,
    pub n_matched: usize,
    /// Only when the stream carries labels.
    pub n_mismatched: Option<usize>,
    pub d2: f64,
    pub l: f64,
    /// Only when the stream carries ground truth.
    pub dt_mm: Option<f64>,
    pub dr_rad: Option<f64>,
    pub assoc_time_ms: f64,
    pub filter_time_ms: f64,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ReportRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.4},{:.4}",
            self.frame,
            self.n_obs,
            self.n_matched,
            opt(self.n_mismatched),
            self.d2,
            self.l,
            opt(self.dt_mm),
            opt(self.dr_rad),
            self.assoc_time_ms,
            self.filter_time_ms
        )
    }
}

fn version_line(kind: &str, version: u32) -> String {
    format!("# calibkit-{kind} v{version}")
}

pub struct ReportWriter<W: Write> {
    out: W,
}

impl<W: Write> ReportWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", version_line("report", REPORT_SCHEMA_VERSION))?;
        writeln!(out, "{}", REPORT_COLUMNS.join(","))?;
        Ok(Self { out })
    }

    pub fn write_row(&mut self, row: &ReportRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        Ok(())
    }

    /// Terminates a partial report.
    pub fn write_error(&mut self, message: &str) -> Result<()> {
        writeln!(self.out, "{ERROR_MARKER}{}", message.replace('\n', " "))?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub rows: Vec<ReportRow>,
    /// Message of a trailing error marker.
    pub error: Option<String>,
}

fn field<T: std::str::FromStr>(s: &str, line: usize, name: &str) -> Result<T> {
    s.parse().map_err(|_| schema(line, format!("bad {name}: {s:?}")))
}

fn opt_field<T: std::str::FromStr>(s: &str, line: usize, name: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        field(s, line, name).map(Some)
    }
}

fn check_preamble<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    kind: &str,
    version: u32,
    columns: &[&str],
) -> Result<()> {
    let expected = version_line(kind, version);
    match lines.next() {
        Some((_, l)) if l == expected => {}
        Some((n, l)) => return Err(schema(n, format!("expected {expected:?}, found {l:?}"))),
        None => return Err(schema(1, "empty file")),
    }
    match lines.next() {
        Some((_, l)) if l == columns.join(",") => Ok(()),
        Some((n, l)) => Err(schema(n, format!("unexpected columns {l:?}"))),
        None => Err(schema(2, "missing column header")),
    }
}

/// Validates and parses a run report. Anything after an error marker is rejected.
pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    check_preamble(&mut lines, "report", REPORT_SCHEMA_VERSION, &REPORT_COLUMNS)?;
    let mut rows = Vec::new();
    let mut error = None;
    for (n, line) in lines {
        if error.is_some() {
            return Err(schema(n, "content after error marker"));
        }
        if let Some(msg) = line.strip_prefix(ERROR_MARKER) {
            error = Some(msg.to_string());
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != REPORT_COLUMNS.len() {
            return Err(schema(n, format!("expected {} fields, found {}", REPORT_COLUMNS.len(), f.len())));
        }
        let row = ReportRow {
            frame: field(f[0], n, "frame")?,
            n_obs: field(f[1], n, "n_obs")?,
            n_matched: field(f[2], n, "n_matched")?,
            n_mismatched: opt_field(f[3], n, "n_mismatched")?,
            d2: field(f[4], n, "d2")?,
            l: field(f[5], n, "l")?,
            dt_mm: opt_field(f[6], n, "dt_mm")?,
            dr_rad: opt_field(f[7], n, "dr_rad")?,
            assoc_time_ms: field(f[8], n, "assoc_time_ms")?,
            filter_time_ms: field(f[9], n, "filter_time_ms")?,
        };
        if row.n_matched > row.n_obs || row.n_mismatched.is_some_and(|m| m > row.n_matched) {
            return Err(schema(n, "inconsistent counts"));
        }
        if row.assoc_time_ms < 0.0 || row.filter_time_ms < 0.0 {
            return Err(schema(n, "negative time"));
        }
        if rows.last().is_some_and(|p: &ReportRow| p.frame >= row.frame) {
            return Err(schema(n, "frames out of order"));
        }
        rows.push(row);
    }
    Ok(ParsedReport { rows, error })
}

// ---------------------------------------------------------------------------------------------
// State trace

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub frame: usize,
    pub x: Vec6,
    pub dt_mm: Option<f64>,
    pub dr_rad: Option<f64>,
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", version_line("trace", TRACE_SCHEMA_VERSION))?;
        writeln!(out, "{}", TRACE_COLUMNS.join(","))?;
        Ok(Self { out })
    }

    pub fn write_row(&mut self, row: &TraceRow) -> Result<()> {
        let mut s = row.frame.to_string();
        for v in row.x.iter() {
            write!(s, ",{v}").expect("writing to a string");
        }
        writeln!(self.out, "{s},{},{}", opt(row.dt_mm), opt(row.dr_rad))?;
        Ok(())
    }

    pub fn write_error(&mut self, message: &str) -> Result<()> {
        writeln!(self.out, "{ERROR_MARKER}{}", message.replace('\n', " "))?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn parse_trace(text: &str) -> Result<(Vec<TraceRow>, Option<String>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    check_preamble(&mut lines, "trace", TRACE_SCHEMA_VERSION, &TRACE_COLUMNS)?;
    let mut rows = Vec::new();
    let mut error = None;
    for (n, line) in lines {
        if error.is_some() {
            return Err(schema(n, "content after error marker"));
        }
        if let Some(msg) = line.strip_prefix(ERROR_MARKER) {
            error = Some(msg.to_string());
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != TRACE_COLUMNS.len() {
            return Err(schema(n, format!("expected {} fields, found {}", TRACE_COLUMNS.len(), f.len())));
        }
        let mut x = Vec6::zeros();
        for i in 0..6 {
            x[i] = field(f[i + 1], n, TRACE_COLUMNS[i + 1])?;
        }
        rows.push(TraceRow {
            frame: field(f[0], n, "frame")?,
            x,
            dt_mm: opt_field(f[7], n, "dt_mm")?,
            dr_rad: opt_field(f[8], n, "dr_rad")?,
        });
    }
    Ok((rows, error))
}

// ---------------------------------------------------------------------------------------------
// Summary

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl Stats {
    /// `None` for an empty sample. Percentiles use the nearest-rank rule.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: rank(0.5),
            p95: rank(0.95),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub command: String,
    pub estimator: EstimatorKind,
    pub visibility: bool,
    pub gating: GatingMode,
    pub frames: usize,
    pub observations: usize,
    pub matched: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mismatched: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_mm: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dr_rad: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assoc_time_ms: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter_time_ms: Option<Stats>,
    pub final_state: [f64; 6],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunSummary {
    pub fn from_rows(
        command: &str,
        config: &PipelineConfig,
        rows: &[ReportRow],
        final_state: &Vec6,
        error: Option<String>,
    ) -> Self {
        let collect = |f: fn(&ReportRow) -> Option<f64>| rows.iter().filter_map(f).collect::<Vec<_>>();
        let labelled = rows.iter().all(|r| r.n_mismatched.is_some()) && !rows.is_empty();
        Self {
            schema_version: SUMMARY_SCHEMA_VERSION,
            command: command.into(),
            estimator: config.estimator,
            visibility: config.visibility,
            gating: config.gating_mode,
            frames: rows.len(),
            observations: rows.iter().map(|r| r.n_obs).sum(),
            matched: rows.iter().map(|r| r.n_matched).sum(),
            mismatched: labelled.then(|| rows.iter().filter_map(|r| r.n_mismatched).sum()),
            dt_mm: Stats::of(&collect(|r| r.dt_mm)),
            dr_rad: Stats::of(&collect(|r| r.dr_rad)),
            assoc_time_ms: Stats::of(&collect(|r| Some(r.assoc_time_ms))),
            filter_time_ms: Stats::of(&collect(|r| Some(r.filter_time_ms))),
            final_state: (*final_state).into(),
            error,
        }
    }
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::generate_scene;

    #[test]
    fn covariance_spec_forms() {
        let d = CovarianceSpec::Diagonal(vec![1.0, 2.0]).to_matrix::<2>().unwrap();
        assert_eq!(d, Matrix2::new(1.0, 0.0, 0.0, 2.0));
        let f = CovarianceSpec::Full(vec![vec![2.0, 1.0], vec![1.0, 2.0]]).to_matrix::<2>().unwrap();
        assert_eq!(f[(0, 1)], 1.0);
        assert!(CovarianceSpec::Full(vec![vec![1.0, 2.0], vec![0.0, 1.0]]).to_matrix::<2>().is_err());
        assert!(CovarianceSpec::Full(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).to_matrix::<2>().is_err());
        assert!(CovarianceSpec::Diagonal(vec![1.0]).to_matrix::<2>().is_err());
    }

    #[test]
    fn default_config_matches_library_defaults() {
        let p = RunConfig::default().pipeline_config().unwrap();
        assert_eq!(p.filter.noise, NoiseModel::filter_default());
        assert_eq!(p.gating, NoiseModel::gating_default());
        assert_eq!(p.gamma, DEFAULT_GAMMA);
        assert_eq!(p.gating_mode, GatingMode::Fixed);
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_values() {
        assert!(RunConfig::from_json_str(r#"{"filtre": {}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"filter": {"forget_factor": 0}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"association": {"alpha": 1.5}}"#).is_err());
        let c = RunConfig::from_json_str(r#"{"filter": {"kind": "aekf"}, "init_frames": 10}"#).unwrap();
        assert_eq!(c.filter.kind, EstimatorKind::Aekf);
        assert_eq!(c.init_frames, 10);
    }

    #[test]
    fn frame_stream_round_trip() {
        let cfg = SceneSpec { frame_count: 12, ..Default::default() }.build().unwrap();
        let header = StreamHeader::from_scene(&cfg);
        let frames: Vec<StreamFrame> = generate_scene(&cfg).unwrap().map(|f| f.unwrap().into()).collect();
        let mut w = FrameWriter::new(Vec::new(), &header).unwrap();
        for f in &frames {
            w.write_frame(f).unwrap();
        }
        let bytes = w.into_inner().unwrap();
        let r = FrameReader::new(bytes.as_slice(), None).unwrap();
        assert_eq!(r.header(), &header);
        let back: Vec<StreamFrame> = r.map(|f| f.unwrap()).collect();
        assert_eq!(back, frames);
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let cfg = SceneSpec { frame_count: 3, ..Default::default() }.build().unwrap();
        let header = StreamHeader::from_scene(&cfg);
        let mut w = FrameWriter::new(Vec::new(), &header).unwrap();
        for f in generate_scene(&cfg).unwrap() {
            w.write_frame(&f.unwrap().into()).unwrap();
        }
        let mut text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        text.push_str("{\"t\": 1.0, \"q\": [0, 0], \"obs\": []}\n");
        let errs: Vec<Error> = FrameReader::new(text.as_bytes(), None).unwrap().filter_map(|f| f.err()).collect();
        assert_eq!(errs.len(), 1);
        assert!(matches!(errs[0], Error::Schema { line: 5, .. }), "{:?}", errs[0]);
    }

    #[test]
    fn header_validation() {
        assert!(matches!(FrameReader::new("".as_bytes(), None), Err(Error::Schema { line: 1, .. })));
        assert!(matches!(FrameReader::new("{}".as_bytes(), None), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn report_round_trip_and_error_marker() {
        let rows = vec![
            ReportRow {
                frame: 0,
                n_obs: 7,
                n_matched: 5,
                n_mismatched: Some(0),
                d2: 3.25,
                l: 41.5,
                dt_mm: Some(12.5),
                dr_rad: Some(0.125),
                assoc_time_ms: 0.5,
                filter_time_ms: 0.25,
            },
            ReportRow {
                frame: 1,
                n_obs: 0,
                n_matched: 0,
                n_mismatched: None,
                d2: 0.0,
                l: f64::INFINITY,
                dt_mm: None,
                dr_rad: None,
                assoc_time_ms: 0.0,
                filter_time_ms: 0.0,
            },
        ];
        let mut w = ReportWriter::new(Vec::new()).unwrap();
        for r in &rows {
            w.write_row(r).unwrap();
        }
        w.write_error("frame 2: boom").unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed.rows, rows);
        assert_eq!(parsed.error.as_deref(), Some("frame 2: boom"));
        assert!(parse_report(&(text + "3,0,0,,0,0,,,0,0\n")).is_err());
    }

    #[test]
    fn report_parser_rejects_malformed_files() {
        assert!(parse_report("").is_err());
        assert!(parse_report("# calibkit-report v2\n").is_err());
        let head = format!("# calibkit-report v1\n{}\n", REPORT_COLUMNS.join(","));
        assert!(parse_report(&head).unwrap().rows.is_empty());
        assert!(parse_report(&(head.clone() + "0,1,2,,0,0,,,0,0\n")).is_err());
        assert!(parse_report(&(head.clone() + "0,1,1,,0,0,,\n")).is_err());
        assert!(parse_report(&(head + "1,1,1,,0,0,,,0,0\n0,1,1,,0,0,,,0,0\n")).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let rows = vec![TraceRow {
            frame: 4,
            x: Vec6::new(0.1, -0.2, 0.3, 0.01, 0.02, -0.03),
            dt_mm: Some(1.5),
            dr_rad: None,
        }];
        let mut w = TraceWriter::new(Vec::new()).unwrap();
        w.write_row(&rows[0]).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(parse_trace(&text).unwrap(), (rows, None));
    }

    #[test]
    fn stats_nearest_rank() {
        let s = Stats::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.median, s.p95, s.max), (2.5, 2.0, 4.0, 4.0));
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn initial_state_round_trip() {
        let s = CalibrationState::new(Vec6::new(0.01, 0.02, 0.03, 0.001, 0.002, 0.003), default_initial_covariance());
        let f = InitialStateFile::new(&s, None);
        let text = to_json_pretty(&f).unwrap();
        let back: InitialStateFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.state().unwrap(), s);
    }
}
