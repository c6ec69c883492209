//! Command implementations behind the `sentinel` binary.
//!
//! Every command is a pure function of its arguments, input files and seed.
//! Artifacts go to `--out` when given and to standard output otherwise;
//! diagnostics go to standard error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sentinel_core::detector::calibrate_detector;
use sentinel_core::eval::{self, ProtocolReport};
use sentinel_core::model::io::{load_rollout, save_rollout};
use sentinel_core::sentinel::{self, CombinedVerdict, StubConfig, StubRule};
use sentinel_core::sim::{generate_rollout_with_id, NominalSource, ScenarioPreset, SimScenario};
use sentinel_core::stac::{fpr_monte_carlo, FprEstimate};
use sentinel_core::{CalibrationResult, Detector, DetectorSpec, EpisodeVerdict, Rollout, SumMode};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] sentinel_core::Error),
    #[error("no input: {0}")]
    EmptyInput(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("false-alarm bound exceeded: {0}")]
    BoundExceeded(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 0 ok, 1 other errors, 2 protocol violation, 3 configuration or shape
    /// mismatch, 4 empty input, 5 precondition failure, 6 `fpr-check` estimate
    /// above δ + 3σ.
    pub fn exit_code(&self) -> i32 {
        use sentinel_core::Error as E;
        match self {
            CliError::Core(E::Protocol(_)) => 2,
            CliError::Core(E::ConfigMismatch(_) | E::Shape(_)) => 3,
            CliError::EmptyInput(_) => 4,
            CliError::Precondition(_) => 5,
            CliError::BoundExceeded(_) => 6,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sentinel", version, about = "Runtime failure detection for action-chunking policies")]
pub struct Cli {
    /// Sum kernel matrices in a fixed order so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic_sum: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic rollouts and a manifest of their labels.
    Simulate(SimulateArgs),
    /// Calibrate a detection threshold on successful rollouts.
    Calibrate(CalibrateArgs),
    /// Replay one rollout through a calibrated monitor.
    Monitor(MonitorArgs),
    /// Monitor a labeled test set and report detection metrics.
    Evaluate(EvaluateArgs),
    /// Monte-Carlo check of the false-alarm bound on a scenario.
    FprCheck(FprCheckArgs),
    /// Scripted slow-monitor events for one rollout.
    SlowStub(SlowStubArgs),
    /// Mean and spread of metrics over several evaluation reports.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON file or preset name.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub count: usize,
    /// Base seed; episode i uses seed + i.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Rollout files or glob patterns.
    #[arg(required = true)]
    pub rollouts: Vec<String>,
    /// Score id (e.g. stac_mmd_rbf) or detector JSON file.
    #[arg(long, default_value = "stac_mmd_rbf")]
    pub detector: String,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    pub rollout: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    /// Slow-monitor events, one JSON object per line.
    #[arg(long)]
    pub slow_events: Option<PathBuf>,
    /// Expected detector; must agree with the calibration artifact.
    #[arg(long)]
    pub detector: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Rollout files or glob patterns.
    #[arg(required = true)]
    pub rollouts: Vec<String>,
    #[arg(long)]
    pub calibration: PathBuf,
    /// Report JSON path; a `.txt` table is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FprCheckArgs {
    /// Scenario JSON file or preset name.
    #[arg(long, default_value = "nominal")]
    pub scenario: String,
    #[arg(long, default_value = "stac_mmd_rbf")]
    pub detector: String,
    /// Repeat to check several levels on the same draws.
    #[arg(long, default_values_t = vec![0.05])]
    pub delta: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub m: usize,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SlowStubArgs {
    pub rollout: PathBuf,
    /// `always_ok`, `flag_if_stalled:<meters>` or `flag_after:<timestep>`.
    #[arg(long, default_value = "always_ok")]
    pub rule: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One line of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub file: String,
    pub success: bool,
    #[serde(rename = "return")]
    pub terminal_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: SimScenario,
    pub base_seed: u64,
    pub count: usize,
    pub episodes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub episode_id: String,
    pub score_id: String,
    #[serde(with = "sentinel_core::model::gamma_serde")]
    pub gamma: f64,
    pub terminal_eta: f64,
    pub fast: EpisodeVerdict,
    pub combined: CombinedVerdict,
    pub detection_time_seconds: Option<f64>,
}

fn sum_mode(deterministic: bool) -> SumMode {
    if deterministic {
        SumMode::Sequential
    } else {
        SumMode::ParallelRows
    }
}

pub fn load_scenario(arg: &str) -> CliResult<SimScenario> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(SimScenario::load(path)?);
    }
    match arg.parse::<ScenarioPreset>() {
        Ok(p) => Ok(p.scenario()),
        Err(_) => Err(CliError::Usage(format!("{arg:?} is neither a scenario file nor a preset"))),
    }
}

pub fn parse_detector(arg: &str) -> CliResult<DetectorSpec> {
    let path = Path::new(arg);
    if arg.ends_with(".json") || path.is_file() {
        let spec: DetectorSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        return Ok(spec);
    }
    Ok(arg.parse()?)
}

/// Expands files and glob patterns into a sorted, de-duplicated path list.
pub fn expand_inputs(patterns: &[String]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let matches = glob::glob(p).map_err(|e| CliError::Usage(format!("bad glob {p:?}: {e}")))?;
        for m in matches {
            let path = m.map_err(|e| CliError::from(std::io::Error::from(e)))?;
            if path.is_file() && path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(path);
            }
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(CliError::EmptyInput(format!("no rollout files match {patterns:?}")));
    }
    Ok(out)
}

pub fn read_rollout(path: &Path) -> CliResult<Rollout> {
    let file = File::open(path)?;
    load_rollout(BufReader::new(file)).map_err(|e| match e {
        sentinel_core::Error::Format { line, message } => sentinel_core::Error::Format {
            line,
            message: format!("{}: {message}", path.display()),
        }
        .into(),
        other => other.into(),
    })
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(text.as_bytes())?;
            lock.flush()?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mode = sum_mode(cli.deterministic_sum);
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
        Command::Calibrate(a) => cmd_calibrate(&a, mode).map(|_| ()),
        Command::Monitor(a) => {
            let report = cmd_monitor(&a, mode)?;
            emit_json(&report, None)
        }
        Command::Evaluate(a) => cmd_evaluate(&a, mode).map(|_| ()),
        Command::FprCheck(a) => cmd_fpr_check(&a, mode).map(|_| ()),
        Command::SlowStub(a) => cmd_slow_stub(&a),
        Command::Aggregate(a) => {
            let reports = a
                .reports
                .iter()
                .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
                .collect::<CliResult<Vec<ProtocolReport>>>()?;
            emit_json(&eval::aggregate(&reports)?, a.out.as_deref())
        }
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<Manifest> {
    let scenario = load_scenario(&a.scenario)?;
    scenario.validate()?;
    fs::create_dir_all(&a.out)?;
    let mut episodes = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let id = format!("{}-{i:05}", scenario.name);
        let rollout = generate_rollout_with_id(&scenario, seed, id.clone())?;
        let file = format!("{id}.jsonl");
        let mut w = BufWriter::new(File::create(a.out.join(&file))?);
        save_rollout(&rollout, &mut w)?;
        w.flush()?;
        episodes.push(ManifestEntry {
            id,
            seed,
            file,
            success: rollout.success,
            terminal_return: rollout.terminal_return,
        });
    }
    let failures = episodes.iter().filter(|e| !e.success).count();
    eprintln!(
        "simulated {} episodes of {} ({failures} failures) into {}",
        a.count,
        scenario.name,
        a.out.display()
    );
    let manifest = Manifest {
        scenario,
        base_seed: a.seed,
        count: a.count,
        episodes,
    };
    emit_json(&manifest, Some(&a.out.join(MANIFEST_FILE)))?;
    Ok(manifest)
}

pub fn cmd_calibrate(a: &CalibrateArgs, mode: SumMode) -> CliResult<CalibrationResult> {
    let mut spec = parse_detector(&a.detector)?;
    spec.set_sum_mode(mode);
    let paths = expand_inputs(&a.rollouts)?;
    let rollouts = paths.iter().map(|p| read_rollout(p)).collect::<CliResult<Vec<_>>>()?;
    let (_, cal) = calibrate_detector(&spec, &rollouts, a.delta)?;
    if cal.is_vacuous() {
        eprintln!(
            "warning: M={} is too small for delta={}; the threshold is +inf and nothing will be flagged",
            cal.m, cal.delta
        );
    }
    emit_json(&cal, a.out.as_deref())?;
    Ok(cal)
}

fn read_calibration(path: &Path) -> CliResult<CalibrationResult> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Detector recorded in `cal`, optionally checked against a requested spec.
fn detector_for(cal: &CalibrationResult, requested: Option<&str>, mode: SumMode) -> CliResult<Detector> {
    if let Some(req) = requested {
        let want = parse_detector(req)?;
        if want.score_id() != cal.score_id {
            return Err(sentinel_core::Error::ConfigMismatch(format!(
                "calibration is for {} but {} was requested",
                cal.score_id,
                want.score_id()
            ))
            .into());
        }
    }
    let det = Detector::from_calibration(cal)?;
    let mut spec = det.spec().clone();
    spec.set_sum_mode(mode);
    Ok(Detector::new(spec, cal.embedding_reference.clone())?)
}

pub fn cmd_monitor(a: &MonitorArgs, mode: SumMode) -> CliResult<MonitorReport> {
    let cal = read_calibration(&a.calibration)?;
    let det = detector_for(&cal, a.detector.as_deref(), mode)?;
    let rollout = read_rollout(&a.rollout)?;
    let (fast, state) = det.replay(&rollout, cal.gamma)?;
    let events = match &a.slow_events {
        Some(p) => sentinel::read_events(BufReader::new(File::open(p)?))?,
        None => Vec::new(),
    };
    if let Some(ev) = events.iter().find(|e| e.episode_id != rollout.episode_id()) {
        return Err(sentinel_core::Error::ConfigMismatch(format!(
            "slow event for episode {} while monitoring {}",
            ev.episode_id,
            rollout.episode_id()
        ))
        .into());
    }
    let combined = sentinel::combine(&fast, &events, rollout.header.dt, rollout.header.k)?;
    Ok(MonitorReport {
        episode_id: rollout.episode_id().to_string(),
        score_id: cal.score_id.clone(),
        gamma: cal.gamma,
        terminal_eta: state.eta,
        fast,
        combined,
        detection_time_seconds: combined.to_episode_verdict(rollout.header.dt).detection_time_seconds,
    })
}

/// Success labels from `manifest.json` files next to the rollouts.
fn manifest_labels(paths: &[PathBuf]) -> CliResult<BTreeMap<String, bool>> {
    let mut labels = BTreeMap::new();
    let dirs: std::collections::BTreeSet<PathBuf> = paths
        .iter()
        .map(|p| p.parent().map(Path::to_path_buf).unwrap_or_default())
        .collect();
    for dir in dirs {
        let path = dir.join(MANIFEST_FILE);
        if path.is_file() {
            let m: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
            for e in m.episodes {
                labels.insert(e.id, e.success);
            }
        }
    }
    Ok(labels)
}

pub fn cmd_evaluate(a: &EvaluateArgs, mode: SumMode) -> CliResult<ProtocolReport> {
    let cal = read_calibration(&a.calibration)?;
    let det = detector_for(&cal, None, mode)?;
    let paths = expand_inputs(&a.rollouts)?;
    let labels = manifest_labels(&paths)?;
    let rollouts = paths.iter().map(|p| read_rollout(p)).collect::<CliResult<Vec<_>>>()?;
    for r in &rollouts {
        if let Some(&label) = labels.get(r.episode_id()) {
            if label != r.success {
                return Err(sentinel_core::Error::Protocol(format!(
                    "manifest label of {} disagrees with its rollout file",
                    r.episode_id()
                ))
                .into());
            }
        }
    }
    let report = eval::evaluate_calibrated(&cal, &det, &rollouts)?;
    let m = &report.metrics;
    eprintln!(
        "{} episodes: tp {} tn {} fp {} fn {}",
        report.episodes.len(),
        m.tp,
        m.tn,
        m.fp,
        m.fn_
    );
    emit_json(&report, a.out.as_deref())?;
    if let Some(out) = &a.out {
        fs::write(out.with_extension("txt"), eval::text_table(&report))?;
    }
    Ok(report)
}

pub fn cmd_fpr_check(a: &FprCheckArgs, mode: SumMode) -> CliResult<Vec<FprEstimate>> {
    if a.trials < 100 {
        return Err(CliError::Precondition(format!(
            "need at least 100 trials, got {}",
            a.trials
        )));
    }
    if a.m < 1 {
        return Err(CliError::Precondition("M must be at least 1".into()));
    }
    let mut spec = parse_detector(&a.detector)?;
    if spec.needs_reference() {
        return Err(CliError::Precondition(format!(
            "{} needs a fitted reference and cannot be checked this way",
            spec.score_id()
        )));
    }
    spec.set_sum_mode(mode);
    let source = NominalSource {
        scenario: load_scenario(&a.scenario)?,
        base_seed: a.seed,
    };
    let det = Detector::new(spec, None)?;
    let estimates = fpr_monte_carlo(&source, &det, a.m, a.trials, &a.delta)?;
    for e in &estimates {
        eprintln!(
            "delta {}: fpr {:.4} ({} / {}), 95% CI [{:.4}, {:.4}], bound delta+2sigma {:.4}",
            e.delta,
            e.fpr,
            e.false_alarms,
            e.trials,
            e.ci_low,
            e.ci_high,
            e.delta + 2.0 * e.sigma_at_delta
        );
    }
    emit_json(&estimates, a.out.as_deref())?;
    if let Some(e) = estimates.iter().find(|e| !e.within(3.0)) {
        return Err(CliError::BoundExceeded(format!(
            "fpr {:.4} > delta {} + 3 sigma",
            e.fpr, e.delta
        )));
    }
    Ok(estimates)
}

pub fn cmd_slow_stub(a: &SlowStubArgs) -> CliResult<()> {
    let rule: StubRule = a.rule.parse()?;
    let rollout = read_rollout(&a.rollout)?;
    let events = sentinel::run_slow_stub(&rollout, &StubConfig::new(rule))?;
    match &a.out {
        Some(path) => sentinel::write_events(BufWriter::new(File::create(path)?), &events)?,
        None => sentinel::write_events(std::io::stdout().lock(), &events)?,
    }
    Ok(())
}
