use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use dmpc::demos::{augment, balance, generate_demonstrations, Dataset, DemoError, DriverProfile};
use dmpc::eval::{
    closed_loop_rollout, compare_report, imitation_metrics, log_points, per_point_stats, write_param_traces,
    write_state_traces, Controller, ControllerKind, EvalError, ImitationReport, ParamController, RolloutLog,
    RolloutOptions, SafetyFilterController, TrackController,
};
use dmpc::nmpc::{NmpcConfig, NmpcParams};
use dmpc::policy::{action_heads, param_heads, setpoint_heads, PolicyWeights, N_FEATURES};
use dmpc::track::{build_loop_track, build_paper_track, CurvatureProfile};
use dmpc::training::{report_path, train_from_files, TrainConfig, TrainError};
use dmpc::vehicle::VehicleParams;

use crate::manifest::RunManifest;

/// Failure of a command; the variant decides the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or inputs: exit code 2.
    Usage(String),
    /// Anything that goes wrong while running: exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DemoError> for CliError {
    fn from(e: DemoError) -> Self {
        match e {
            DemoError::UnknownProfile(_) | DemoError::Invalid(_) | DemoError::TrackMismatch { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::TrackMismatch { .. } | EvalError::Invalid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Json(_) | TrainError::Demo(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Settings shared by every command.
#[derive(Clone, Debug)]
pub struct Globals {
    pub seed: Option<u64>,
    pub jobs: usize,
    /// Root that relative output paths are resolved against.
    pub out_root: Option<PathBuf>,
}

impl Globals {
    pub fn output(&self, path: &Path) -> Result<PathBuf, CliError> {
        let full = match &self.out_root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(dir) = full.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(full)
    }
}

pub const TRACK_NAMES: [&str; 2] = ["paper", "loop"];

pub fn builtin_track(name: &str) -> Result<CurvatureProfile, CliError> {
    match name {
        "paper" => Ok(build_paper_track()),
        "loop" => build_loop_track(80.0, 60.0, 4.5).map_err(runtime),
        other => Err(CliError::Usage(format!(
            "unknown track {other:?}; known tracks: {}",
            TRACK_NAMES.join(", ")
        ))),
    }
}

fn track_by_hash(hash: &str) -> Result<CurvatureProfile, CliError> {
    for name in TRACK_NAMES {
        let track = builtin_track(name)?;
        if track.hash() == hash {
            return Ok(track);
        }
    }
    Err(CliError::Usage(format!("no built-in track has hash {hash}")))
}

fn nmpc_config(track: &CurvatureProfile) -> NmpcConfig {
    NmpcConfig::new(VehicleParams::nominal(), track.lane_width())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require_file(path, "dataset")?;
    require_file(&dmpc::eval::sidecar(path), "dataset metadata")?;
    Ok(Dataset::load(path)?)
}

fn finish(mut manifest: RunManifest, primary: &Path, start: Instant) -> Result<(), CliError> {
    manifest.wall_time = start.elapsed().as_secs_f64();
    let path = manifest.save(primary)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct GenDemosArgs {
    pub profile: String,
    pub laps: usize,
    pub track: String,
    pub noise: Option<f64>,
    pub augment: f64,
    pub augment_magnitude: f64,
    pub balance: bool,
    pub out: PathBuf,
}

pub fn gen_demos(args: &GenDemosArgs, g: &Globals) -> Result<(), CliError> {
    let start = Instant::now();
    let seed = g.seed.unwrap_or(0);
    let mut profile = DriverProfile::builtin(&args.profile)?;
    if let Some(noise) = args.noise {
        profile = profile.with_noise(noise);
    }
    if args.laps == 0 {
        return Err(CliError::Usage("--laps must be at least 1".into()));
    }
    let track = builtin_track(&args.track)?;
    let cfg = nmpc_config(&track);
    profile.validate(&cfg, &track)?;

    let mut data = generate_demonstrations(&profile, args.laps, seed, &cfg, &track)?;
    if args.augment > 0.0 {
        data = augment(&data, args.augment_magnitude, args.augment, seed, &track)?;
    }
    if args.balance {
        data = balance(&data, seed, &track);
    }
    let out = g.output(&args.out)?;
    data.save(&out)?;
    println!("{} samples over {} laps written to {}", data.samples.len(), args.laps, out.display());

    let mut m = RunManifest::new("gen-demos", args, seed);
    m.output(&out)?;
    m.output(&dmpc::eval::sidecar(&out))?;
    finish(m, &out, start)
}

pub fn train(config: &Path, g: &Globals) -> Result<(), CliError> {
    let start = Instant::now();
    require_file(config, "config")?;
    let mut cfg = TrainConfig::load(config)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if g.jobs > 1 {
        cfg.jobs = g.jobs;
    }
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(CliError::Usage("config has no checkpoint path".into()));
    }
    cfg.checkpoint = g.output(&cfg.checkpoint)?;
    let data = load_dataset(&cfg.dataset)?;
    let track = track_by_hash(&data.meta.track_hash)?;
    drop(data);

    let outcome = train_from_files(&cfg, &track)?;
    let r = &outcome.report;
    println!(
        "{} model: {} epochs, final train loss {:.6}, best epoch {:?}, {} skipped samples",
        r.mode,
        r.epochs.len(),
        r.final_train_loss().unwrap_or(f64::NAN),
        r.best_epoch,
        r.skipped
    );
    println!("checkpoint {}", cfg.checkpoint.display());

    let mut m = RunManifest::new("train", &cfg, cfg.seed);
    m.input(config)?;
    m.input(&cfg.dataset)?;
    m.output(&cfg.checkpoint)?;
    m.output(&report_path(&cfg.checkpoint))?;
    let mut epochs = cfg.checkpoint.as_os_str().to_owned();
    epochs.push(".epochs.csv");
    m.output(Path::new(&epochs))?;
    finish(m, &cfg.checkpoint, start)
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateArgs {
    pub controller: String,
    pub checkpoint: Option<PathBuf>,
    pub profile: String,
    pub track: String,
    pub laps: usize,
    pub start_speed: Option<f64>,
    pub jitter: Option<f64>,
    pub out: PathBuf,
}

fn load_policy(path: &Path, expected: &[dmpc::policy::Head], kind: ControllerKind) -> Result<PolicyWeights, CliError> {
    require_file(path, "checkpoint")?;
    let w = PolicyWeights::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if w.heads != expected || w.n_inputs() != N_FEATURES {
        return Err(CliError::Usage(format!(
            "{} is not a {} checkpoint",
            path.display(),
            kind.name()
        )));
    }
    Ok(w)
}

/// Fixed parameters of a static checkpoint: a network that ignores its input.
fn static_params(w: &PolicyWeights, path: &Path) -> Result<NmpcParams, CliError> {
    if w.layers.iter().any(|l| l.weights.iter().any(|&v| v != 0.0)) {
        return Err(CliError::Usage(format!("{} is not a static-parameter checkpoint", path.display())));
    }
    let out = w.forward(&[0.0; N_FEATURES]).map_err(runtime)?;
    Ok(NmpcParams::from_array(out.output()))
}

pub fn simulate(args: &SimulateArgs, g: &Globals) -> Result<(), CliError> {
    let start = Instant::now();
    let seed = g.seed.unwrap_or(0);
    let kind = ControllerKind::parse(&args.controller).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown controller {:?}; expected expert, static, dynamic, track or sf",
            args.controller
        ))
    })?;
    if args.laps == 0 {
        return Err(CliError::Usage("--laps must be at least 1".into()));
    }
    let profile = DriverProfile::builtin(&args.profile)?;
    let track = builtin_track(&args.track)?;
    let cfg = nmpc_config(&track);
    let checkpoint = match (kind, &args.checkpoint) {
        (ControllerKind::Expert, _) => None,
        (_, Some(p)) => Some(p.as_path()),
        (_, None) => {
            return Err(CliError::Usage(format!("controller {} needs --checkpoint", kind.name())));
        }
    };

    let policy = match (kind, checkpoint) {
        (ControllerKind::Static | ControllerKind::Dynamic, Some(p)) => Some(load_policy(p, &param_heads(&cfg), kind)?),
        (ControllerKind::Track, Some(p)) => Some(load_policy(p, &setpoint_heads(&cfg), kind)?),
        (ControllerKind::Sf, Some(p)) => Some(load_policy(p, &action_heads(&cfg), kind)?),
        _ => None,
    };
    let mut controller: Box<dyn Controller + '_> = match (kind, &policy) {
        (ControllerKind::Expert, _) => Box::new(ParamController::expert(&profile, &cfg, &track)),
        (ControllerKind::Static, Some(w)) => {
            Box::new(ParamController::fixed(static_params(w, checkpoint.unwrap())?, &cfg, &track))
        }
        (ControllerKind::Dynamic, Some(w)) => Box::new(ParamController::network(w, &cfg, &track)),
        (ControllerKind::Track, Some(w)) => Box::new(TrackController::new(w, &cfg, &track)),
        (ControllerKind::Sf, Some(w)) => Box::new(SafetyFilterController::new(w, &cfg, &track)),
        _ => unreachable!("every learned controller has a checkpoint"),
    };

    let opts = RolloutOptions {
        laps: args.laps,
        seed,
        start_speed: args.start_speed.unwrap_or(profile.start_speed),
        jitter: args.jitter.unwrap_or(profile.noise),
        ..Default::default()
    };
    let log = closed_loop_rollout(controller.as_mut(), &cfg, &track, &opts)?;
    let out = g.output(&args.out)?;
    log.save(&out).map_err(runtime)?;
    println!(
        "{}: {} steps, |d| max {:.3} m, {} fallbacks, written to {}",
        kind.name(),
        log.rows.len(),
        log.max_abs_offset(),
        log.meta.fallbacks,
        out.display()
    );
    for e in &log.meta.events {
        log::warn!("{e}");
    }

    let mut m = RunManifest::new("simulate", args, seed);
    if let Some(p) = checkpoint {
        m.input(p)?;
    }
    m.output(&out)?;
    m.output(&dmpc::eval::sidecar(&out))?;
    finish(m, &out, start)?;
    if log.meta.failed {
        return Err(CliError::Runtime(format!("rollout failed: {}", log.meta.events.join("; "))));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateArgs {
    pub log: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub traces: Option<PathBuf>,
    pub param_traces: Option<PathBuf>,
}

pub fn evaluate(args: &EvaluateArgs, g: &Globals) -> Result<(), CliError> {
    let start = Instant::now();
    require_file(&args.log, "rollout log")?;
    let log = RolloutLog::load(&args.log).map_err(|e| CliError::Usage(format!("{}: {e}", args.log.display())))?;
    let data = load_dataset(&args.dataset)?;
    if log.meta.track_hash != data.meta.track_hash {
        return Err(CliError::Usage(format!(
            "rollout ran on track {} but the demonstrations on {}",
            log.meta.track_hash, data.meta.track_hash
        )));
    }
    let track = track_by_hash(&data.meta.track_hash)?;
    let cfg = &data.meta.nmpc;
    let stats = per_point_stats(&data, cfg, &track)?;
    let points = log_points(&log);
    let report = imitation_metrics(log.meta.controller.name(), &points, &stats)?;
    let out = g.output(&args.out)?;
    std::fs::write(&out, serde_json::to_string_pretty(&report).map_err(runtime)? + "\n")?;
    print!("{}", report.to_text());

    let mut m = RunManifest::new("evaluate", args, g.seed.unwrap_or(0));
    m.input(&args.log)?;
    m.input(&args.dataset)?;
    m.output(&out)?;
    if let Some(p) = &args.traces {
        let p = g.output(p)?;
        write_state_traces(std::fs::File::create(&p)?, &stats, &points)?;
        m.output(&p)?;
    }
    if let Some(p) = &args.param_traces {
        if !log.has_params() {
            log::warn!("{} controller logs no cost parameters", log.meta.controller.name());
        }
        let p = g.output(p)?;
        write_param_traces(std::fs::File::create(&p)?, &log)?;
        m.output(&p)?;
    }
    finish(m, &out, start)
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareArgs {
    pub reports: Vec<PathBuf>,
    pub out: PathBuf,
}

pub fn compare(args: &CompareArgs, g: &Globals) -> Result<(), CliError> {
    let start = Instant::now();
    let mut reports = Vec::new();
    for path in &args.reports {
        require_file(path, "report")?;
        let text = std::fs::read_to_string(path)?;
        let r: ImitationReport =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        reports.push(r);
    }
    let table = compare_report(&reports)?;
    for w in &table.warnings {
        log::warn!("{w}");
    }
    let out = g.output(&args.out)?;
    std::fs::write(&out, serde_json::to_string_pretty(&table).map_err(runtime)? + "\n")?;
    let text = table.to_text();
    std::io::stdout().write_all(text.as_bytes())?;

    let mut m = RunManifest::new("compare", args, g.seed.unwrap_or(0));
    for p in &args.reports {
        m.input(p)?;
    }
    m.output(&out)?;
    finish(m, &out, start)
}
