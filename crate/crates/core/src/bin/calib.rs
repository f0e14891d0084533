//! `calib`: simulate scenes, initialize and run on-the-fly hand-eye calibration, benchmark.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use calibkit::geometry::CalibrationState;
use calibkit::io::{
    read_frame_stream, to_json_pretty, zero_state, FrameReader, FrameWriter, InitialStateFile, ReportWriter,
    RunConfig, RunSummary, Stats, StreamFrame, StreamHeader, TraceWriter,
};
use calibkit::pipeline::{EstimatorKind, GatingMode, PipelineConfig};
use calibkit::runner::{associate_frame, initial_estimate, Runner};
use calibkit::simulator::{generate_scene, DisturbanceLevel, DisturbanceSchedule, DisturbanceTarget, StockScene};

#[derive(Parser)]
#[command(name = "calib", version, about = "On-the-fly hand-eye calibration from unlabeled keypoints")]
struct Cli {
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for the scene (simulate), RANSAC (init) or particle filter (calibrate, bench).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame stream.
    Simulate(SimulateArgs),
    /// Estimate an initial state from the first frames of a stream.
    Init(InitArgs),
    /// Run the calibration pipeline over a stream.
    Calibrate(CalibrateArgs),
    /// Time the pipeline per estimator.
    Bench(BenchArgs),
    /// Diagnose association on a single frame.
    Associate(AssociateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Disturbance {
    Off,
    Low,
    Medium,
    High,
}

#[derive(Args)]
struct PipelineFlags {
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    /// Skip the visibility check.
    #[arg(long)]
    no_visibility: bool,
    #[arg(long, value_enum)]
    gating: Option<GatingArg>,
    /// Particle filter: propagate the weighted sample covariance.
    #[arg(long)]
    pf_adapt_cov: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FilterArg {
    Ekf,
    Aekf,
    Pf,
    Pnp,
}

impl From<FilterArg> for EstimatorKind {
    fn from(f: FilterArg) -> Self {
        match f {
            FilterArg::Ekf => EstimatorKind::Ekf,
            FilterArg::Aekf => EstimatorKind::Aekf,
            FilterArg::Pf => EstimatorKind::Pf,
            FilterArg::Pnp => EstimatorKind::Pnp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GatingArg {
    Fixed,
    State,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneArg {
    Sweep,
    Fast,
    Static,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output frame stream (JSONL).
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    scene: Option<SceneArg>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum)]
    disturbance: Option<Disturbance>,
    /// Kick the estimate instead of moving the true transform.
    #[arg(long)]
    disturb_estimate: bool,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    stream: PathBuf,
    /// Output initial state (JSON).
    #[arg(long, short)]
    out: PathBuf,
    /// Number of leading frames to use.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    stream: PathBuf,
    /// Initial state (JSON); defaults to x = 0.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Directory receiving report.csv, trace.csv and summary.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Write zero timing columns so reports are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    init: Option<PathBuf>,
    /// Estimators to time; repeatable. Defaults to ekf, aekf and pf.
    #[arg(long = "filter", value_enum)]
    filters: Vec<FilterArg>,
    #[arg(long)]
    no_visibility: bool,
    #[arg(long, value_enum)]
    gating: Option<GatingArg>,
    /// Skip wall-clock measurement; only pair counts are reported.
    #[arg(long)]
    no_timing: bool,
    /// Write the timing report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AssociateArgs {
    #[arg(long)]
    stream: PathBuf,
    /// Zero-based frame index.
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CALIBKIT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Simulate(a) => simulate(&mut config, cli.seed, a),
        Command::Init(a) => init(&mut config, cli.seed, a),
        Command::Calibrate(a) => calibrate(&mut config, cli.seed, a),
        Command::Bench(a) => bench(&mut config, cli.seed, a),
        Command::Associate(a) => associate(&mut config, cli.seed, a),
    }
}

fn apply_flags(config: &mut RunConfig, seed: Option<u64>, flags: &PipelineFlags) -> anyhow::Result<PipelineConfig> {
    if let Some(f) = flags.filter {
        config.filter.kind = f.into();
    }
    if let Some(s) = seed {
        config.filter.seed = s;
    }
    if flags.no_visibility {
        config.visibility.enabled = false;
    }
    if let Some(g) = flags.gating {
        config.association.gating = gating(g);
    }
    if flags.pf_adapt_cov {
        config.filter.pf_adapt_cov = true;
    }
    Ok(config.pipeline_config()?)
}

fn gating(g: GatingArg) -> GatingMode {
    match g {
        GatingArg::Fixed => GatingMode::Fixed,
        GatingArg::State => GatingMode::State,
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_initial(path: Option<&Path>) -> anyhow::Result<CalibrationState> {
    match path {
        Some(p) => Ok(InitialStateFile::load(p).with_context(|| format!("initial state {}", p.display()))?.state()?),
        None => {
            log::info!("no initial state given; starting from x = 0");
            Ok(zero_state())
        }
    }
}

fn open_stream(path: &Path) -> anyhow::Result<FrameReader<BufReader<File>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(FrameReader::new(BufReader::new(file), path.parent()).with_context(|| format!("stream {}", path.display()))?)
}

fn simulate(config: &mut RunConfig, seed: Option<u64>, a: SimulateArgs) -> anyhow::Result<()> {
    let spec = &mut config.scene;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = a.frames {
        spec.frame_count = n;
    }
    if let Some(s) = a.scene {
        spec.scene = match s {
            SceneArg::Sweep => StockScene::Sweep,
            SceneArg::Fast => StockScene::Fast,
            SceneArg::Static => StockScene::Static,
        };
    }
    if let Some(d) = a.disturbance {
        let level = match d {
            Disturbance::Off => None,
            Disturbance::Low => Some(DisturbanceLevel::Low),
            Disturbance::Medium => Some(DisturbanceLevel::Medium),
            Disturbance::High => Some(DisturbanceLevel::High),
        };
        spec.disturbance = level.map(DisturbanceSchedule::new);
    }
    if a.disturb_estimate {
        match &mut spec.disturbance {
            Some(s) => s.target = DisturbanceTarget::Estimate,
            None => bail!("--disturb-estimate needs a disturbance level"),
        }
    }
    let scene = spec.build()?;
    let mut writer = FrameWriter::new(create(&a.out)?, &StreamHeader::from_scene(&scene))?;
    for frame in generate_scene(&scene)? {
        writer.write_frame(&StreamFrame::from(frame?))?;
    }
    writer.into_inner()?;
    log::info!("wrote {} frames to {}", scene.frame_count, a.out.display());
    Ok(())
}

fn init(config: &mut RunConfig, seed: Option<u64>, a: InitArgs) -> anyhow::Result<()> {
    if let Some(s) = seed {
        config.ransac.seed = s;
    }
    let n = a.frames.unwrap_or(config.init_frames);
    let pipeline = config.pipeline_config()?;
    let (header, frames) = read_frame_stream(&a.stream).with_context(|| format!("stream {}", a.stream.display()))?;
    if n > frames.len() {
        log::warn!("requested {n} init frames but the stream has {}; using all of them", frames.len());
    }
    if frames.iter().take(n).any(|f| f.labels.is_none()) {
        log::warn!("stream has no labels; bootstrapping correspondences with JCBB at x = 0");
    }
    let (state, meta) = initial_estimate(&header, &frames, n, &config.ransac, &pipeline.gating, &pipeline.jcbb)?;
    if meta.gimbal_lock {
        log::warn!("initial pose is near the Euler singularity");
    }
    let mut out = create(&a.out)?;
    out.write_all(to_json_pretty(&InitialStateFile::new(&state, Some(meta)))?.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn calibrate(config: &mut RunConfig, seed: Option<u64>, a: CalibrateArgs) -> anyhow::Result<()> {
    let pipeline = apply_flags(config, seed, &a.pipeline)?;
    let initial = load_initial(a.init.as_deref())?;
    let reader = open_stream(&a.stream)?;
    let header = reader.header().clone();
    let mut runner = Runner::new(&header, initial, pipeline.clone(), !a.no_timing)?;

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut report = ReportWriter::new(create(&a.out_dir.join("report.csv"))?)?;
    let mut trace = TraceWriter::new(create(&a.out_dir.join("trace.csv"))?)?;
    let mut rows = Vec::new();
    let mut failure = None;
    for frame in reader {
        let step = frame.and_then(|f| runner.step(&f));
        match step {
            Ok(s) => {
                report.write_row(&s.row)?;
                trace.write_row(&s.trace)?;
                rows.push(s.row);
            }
            Err(e) => {
                failure = Some(format!("frame {}: {e}", rows.len()));
                break;
            }
        }
    }
    if let Some(msg) = &failure {
        report.write_error(msg)?;
        trace.write_error(msg)?;
    }
    report.into_inner()?;
    trace.into_inner()?;
    let summary = RunSummary::from_rows("calibrate", &pipeline, &rows, &runner.pipeline().state().x, failure.clone());
    let mut out = create(&a.out_dir.join("summary.json"))?;
    out.write_all(to_json_pretty(&summary)?.as_bytes())?;
    out.flush()?;
    match failure {
        Some(msg) => bail!(msg),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct BenchEntry {
    estimator: EstimatorKind,
    frames: usize,
    assoc_time_ms: Option<Stats>,
    filter_time_ms: Option<Stats>,
    total_time_ms: Option<Stats>,
    matched: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames_per_second: Option<f64>,
}

#[derive(Serialize)]
struct BenchReport {
    schema_version: u32,
    visibility: bool,
    results: Vec<BenchEntry>,
}

fn bench(config: &mut RunConfig, seed: Option<u64>, a: BenchArgs) -> anyhow::Result<()> {
    let filters =
        if a.filters.is_empty() { vec![FilterArg::Ekf, FilterArg::Aekf, FilterArg::Pf] } else { a.filters.clone() };
    let initial = load_initial(a.init.as_deref())?;
    let (header, frames) = read_frame_stream(&a.stream).with_context(|| format!("stream {}", a.stream.display()))?;
    let mut results = Vec::new();
    let mut visibility = true;
    for f in filters {
        let flags =
            PipelineFlags { filter: Some(f), no_visibility: a.no_visibility, gating: a.gating, pf_adapt_cov: false };
        let pipeline = apply_flags(config, seed, &flags)?;
        visibility = pipeline.visibility;
        let mut runner = Runner::new(&header, initial, pipeline, !a.no_timing)?;
        let (mut assoc, mut filt) = (Vec::new(), Vec::new());
        let mut matched = 0;
        for frame in &frames {
            let s = runner.step(frame)?;
            matched += s.row.n_matched;
            assoc.push(s.row.assoc_time_ms);
            filt.push(s.row.filter_time_ms);
        }
        let total: Vec<f64> = assoc.iter().zip(&filt).map(|(a, b)| a + b).collect();
        let sum: f64 = total.iter().sum();
        results.push(BenchEntry {
            estimator: f.into(),
            frames: frames.len(),
            assoc_time_ms: Stats::of(&assoc),
            filter_time_ms: Stats::of(&filt),
            total_time_ms: Stats::of(&total),
            matched,
            frames_per_second: (sum > 0.0).then(|| frames.len() as f64 * 1e3 / sum),
        });
    }
    let text = to_json_pretty(&BenchReport { schema_version: 1, visibility, results })?;
    write_output(a.out.as_deref(), &text)
}

fn associate(config: &mut RunConfig, seed: Option<u64>, a: AssociateArgs) -> anyhow::Result<()> {
    let pipeline = apply_flags(config, seed, &a.pipeline)?;
    let state = load_initial(a.init.as_deref())?;
    let mut reader = open_stream(&a.stream)?;
    let header = reader.header().clone();
    let frame = match reader.nth(a.frame) {
        Some(f) => f?,
        None => bail!("stream has fewer than {} frames", a.frame + 1),
    };
    let report = associate_frame(&header, &frame, &state, &pipeline)?;
    write_output(a.out.as_deref(), &to_json_pretty(&report)?)
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            let mut out = create(p)?;
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}
