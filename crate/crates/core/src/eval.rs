//! Closed-loop simulation, per-track-point demonstration statistics and
//! imitation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{Dataset, DriverProfile, Split};
use crate::nmpc::{solve_problem, NmpcConfig, NmpcError, NmpcParams, NmpcProblem, NmpcSolution, Variant, N_PARAMS, PARAM_NAMES};
use crate::policy::{PolicyError, PolicyWeights};
use crate::track::CurvatureProfile;
use crate::vehicle::{body_accelerations, step_state, ControlInput, DynamicsError, VehicleState};

pub const CONTROL_HZ: f64 = 10.0;
/// Control period, seconds.
pub const CONTROL_DT: f64 = 1.0 / CONTROL_HZ;
/// Plant integration steps per control period.
pub const PLANT_SUBSTEPS: usize = 10;
/// Floor on the demonstration standard deviation in Z-scores.
pub const SD_FLOOR: f64 = 0.05;
/// Mean Z-score above which a state is flagged.
pub const MZ_FLAG: f64 = 2.0;
pub const Z_EXCEEDANCE: f64 = 3.0;
/// Distance beyond the lane edge at which a run is declared failed.
pub const DEPARTURE_MARGIN: f64 = 0.5;
pub const EVAL_STATES: [&str; 4] = ["vx", "d", "ax", "ay"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("plant: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("{0}")]
    Invalid(String),
    #[error("track mismatch: expected {expected}, found {found}")]
    TrackMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Track,
    Sf,
    Static,
    Dynamic,
    Expert,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Track => "track",
            ControllerKind::Sf => "sf",
            ControllerKind::Static => "static",
            ControllerKind::Dynamic => "dynamic",
            ControllerKind::Expert => "expert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Track, Self::Sf, Self::Static, Self::Dynamic, Self::Expert]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// One control decision and the cost parameters behind it, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: ControlInput,
    pub params: Option<[f64; N_PARAMS]>,
}

pub trait Controller {
    fn kind(&self) -> ControllerKind;
    /// Forget warm-start state, e.g. at the start of a lap.
    fn reset(&mut self);
    fn act(&mut self, s: &VehicleState) -> Result<Decision, EvalError>;
}

/// Receding-horizon solver with warm starting across calls.
#[derive(Clone, Debug)]
struct Mpc<'a> {
    cfg: NmpcConfig,
    track: &'a CurvatureProfile,
    prev: Option<NmpcSolution>,
}

impl<'a> Mpc<'a> {
    fn new(cfg: &NmpcConfig, track: &'a CurvatureProfile) -> Self {
        Self {
            cfg: cfg.clone(),
            track,
            prev: None,
        }
    }

    fn solve(&mut self, s: &VehicleState, variant: Variant, p: &[f64]) -> Result<ControlInput, EvalError> {
        let problem = NmpcProblem::new(s, &self.cfg, self.track, variant)?;
        match solve_problem(&problem, p, self.prev.as_ref()) {
            Ok(sol) => {
                let a = sol.action;
                self.prev = Some(sol);
                Ok(a)
            }
            Err(e) => {
                self.prev = None;
                Err(e.into())
            }
        }
    }
}

/// Cost-parameter NMPC driven by a parameter source: an expert schedule,
/// a fixed vector or the policy network.
pub struct ParamController<'a> {
    kind: ControllerKind,
    source: ParamSource<'a>,
    mpc: Mpc<'a>,
}

enum ParamSource<'a> {
    Schedule(&'a DriverProfile),
    Fixed(NmpcParams),
    Network(&'a PolicyWeights),
}

impl<'a> ParamController<'a> {
    pub fn expert(profile: &'a DriverProfile, cfg: &NmpcConfig, track: &'a CurvatureProfile) -> Self {
        Self {
            kind: ControllerKind::Expert,
            source: ParamSource::Schedule(profile),
            mpc: Mpc::new(cfg, track),
        }
    }

    pub fn fixed(params: NmpcParams, cfg: &NmpcConfig, track: &'a CurvatureProfile) -> Self {
        Self {
            kind: ControllerKind::Static,
            source: ParamSource::Fixed(params),
            mpc: Mpc::new(cfg, track),
        }
    }

    pub fn network(policy: &'a PolicyWeights, cfg: &NmpcConfig, track: &'a CurvatureProfile) -> Self {
        Self {
            kind: ControllerKind::Dynamic,
            source: ParamSource::Network(policy),
            mpc: Mpc::new(cfg, track),
        }
    }
}

impl Controller for ParamController<'_> {
    fn kind(&self) -> ControllerKind {
        self.kind
    }

    fn reset(&mut self) {
        self.mpc.prev = None;
    }

    fn act(&mut self, s: &VehicleState) -> Result<Decision, EvalError> {
        let p = match &self.source {
            ParamSource::Schedule(profile) => profile.params(s, self.mpc.track),
            ParamSource::Fixed(p) => *p,
            ParamSource::Network(w) => w.params(s, self.mpc.track)?,
        };
        p.validate(&self.mpc.cfg)?;
        let params = p.to_array();
        let action = self.mpc.solve(s, Variant::Dynamic, &params)?;
        Ok(Decision {
            action,
            params: Some(params),
        })
    }
}

/// Setpoint tracker fed by a network predicting `[d, vx]` 1.5 s ahead.
pub struct TrackController<'a> {
    policy: &'a PolicyWeights,
    mpc: Mpc<'a>,
}

impl<'a> TrackController<'a> {
    pub fn new(policy: &'a PolicyWeights, cfg: &NmpcConfig, track: &'a CurvatureProfile) -> Self {
        Self {
            policy,
            mpc: Mpc::new(cfg, track),
        }
    }
}

impl Controller for TrackController<'_> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Track
    }

    fn reset(&mut self) {
        self.mpc.prev = None;
    }

    fn act(&mut self, s: &VehicleState) -> Result<Decision, EvalError> {
        let f = self.policy.features(s, self.mpc.track);
        let out = self.policy.forward(&f.normalized)?;
        let action = self.mpc.solve(s, Variant::Track, out.output())?;
        Ok(Decision { action, params: None })
    }
}

/// Network proposing `[δ, t_r]`, filtered by the safety NMPC. When a
/// filter solve fails the controller follows the last filtered plan until
/// it runs out.
pub struct SafetyFilterController<'a> {
    policy: &'a PolicyWeights,
    mpc: Mpc<'a>,
    backup: Vec<ControlInput>,
    backup_next: usize,
}

impl<'a> SafetyFilterController<'a> {
    pub fn new(policy: &'a PolicyWeights, cfg: &NmpcConfig, track: &'a CurvatureProfile) -> Self {
        Self {
            policy,
            mpc: Mpc::new(cfg, track),
            backup: Vec::new(),
            backup_next: 0,
        }
    }

    /// Steering-rate/throttle proposal of the network at `s`.
    pub fn proposal(&self, s: &VehicleState) -> Result<[f64; 2], EvalError> {
        let f = self.policy.features(s, self.mpc.track);
        let out = self.policy.forward(&f.normalized)?;
        Ok(network_action_to_rate(out.output(), s, &self.mpc.cfg))
    }
}

/// The network predicts a steering angle; the filter works on rates, so
/// the angle is reached over one control period where the rate limit
/// allows.
pub fn network_action_to_rate(out: &[f64], s: &VehicleState, cfg: &NmpcConfig) -> [f64; 2] {
    let limit = cfg.vehicle.delta_rate_max;
    let rate = ((out[0] - s.delta) / CONTROL_DT).clamp(-limit, limit);
    [rate, out[1].clamp(0.0, 1.0)]
}

impl Controller for SafetyFilterController<'_> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Sf
    }

    fn reset(&mut self) {
        self.mpc.prev = None;
        self.backup.clear();
    }

    fn act(&mut self, s: &VehicleState) -> Result<Decision, EvalError> {
        let a = self.proposal(s)?;
        let action = match self.mpc.solve(s, Variant::SafetyFilter, &a) {
            Ok(action) => {
                self.backup = self.mpc.prev.as_ref().map_or_else(Vec::new, |p| p.controls.clone());
                self.backup_next = 1;
                action
            }
            Err(e) if self.backup_next < self.backup.len() => {
                log::debug!("safety filter failed ({e}); following the previous plan");
                self.backup_next += 1;
                self.backup[self.backup_next - 1]
            }
            Err(e) => return Err(e),
        };
        Ok(Decision { action, params: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub laps: usize,
    pub seed: u64,
    /// Speed of the aligned start state of every lap.
    pub start_speed: f64,
    /// Per-lap start-state jitter level; 0 gives identical laps.
    pub jitter: f64,
    /// Warn when a cost parameter jumps by more than this between steps.
    pub param_jump_warn: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            laps: 1,
            seed: 0,
            start_speed: 18.5,
            jitter: 0.0,
            param_jump_warn: 2.0,
        }
    }
}

/// Start of a lap: aligned at `σ = 0` plus uniform jitter of at most
/// `0.5 m/s` on `vx`, `0.3 m` on `d` and `0.02 rad` on `θ` per unit level.
pub fn lap_start(opts: &RolloutOptions, rng: &mut ChaCha8Rng) -> VehicleState {
    let mut s = VehicleState::aligned(0.0, opts.start_speed);
    if opts.jitter > 0.0 {
        let j = opts.jitter;
        s.vx += rng.gen_range(-0.5..=0.5) * j;
        s.d += rng.gen_range(-0.3..=0.3) * j;
        s.theta += rng.gen_range(-0.02..=0.02) * j;
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub lap: usize,
    pub state: VehicleState,
    pub action: ControlInput,
    pub ax: f64,
    pub ay: f64,
    pub params: Option<[f64; N_PARAMS]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutMeta {
    pub controller: ControllerKind,
    pub track_hash: String,
    pub options: RolloutOptions,
    pub failed: bool,
    pub fallbacks: usize,
    pub events: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutLog {
    pub rows: Vec<LogRow>,
    pub meta: RolloutMeta,
}

/// Steering angle held (zero rate) with the throttle released.
pub fn fallback_action() -> ControlInput {
    ControlInput::new(0.0, 0.0)
}

/// Drive `opts.laps` laps at 10 Hz. Every lap restarts at `σ = 0`; the
/// plant integrates the held action with [`PLANT_SUBSTEPS`] RK4 steps.
pub fn closed_loop_rollout(
    controller: &mut dyn Controller,
    cfg: &NmpcConfig,
    track: &CurvatureProfile,
    opts: &RolloutOptions,
) -> Result<RolloutLog, EvalError> {
    if opts.laps == 0 {
        return Err(EvalError::Invalid("at least one lap is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let length = track.total_length();
    let max_steps = (10.0 * length / (cfg.vehicle.vmin * CONTROL_DT)) as usize;
    let departure = cfg.half_lane() + DEPARTURE_MARGIN;
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let mut fallbacks = 0;
    let mut failed = false;
    let mut ticks = 0u64;
    'laps: for lap in 0..opts.laps {
        let mut s = lap_start(opts, &mut rng);
        controller.reset();
        let mut last_params: Option<[f64; N_PARAMS]> = None;
        for step in 0.. {
            if s.sigma >= length {
                break;
            }
            if step >= max_steps {
                events.push(format!("lap {lap}: no progress after {step} steps"));
                failed = true;
                break 'laps;
            }
            let decision = match controller.act(&s) {
                Ok(d) => d,
                Err(e) => {
                    fallbacks += 1;
                    let msg = format!("lap {lap} step {step} sigma {:.1}: {e}; fallback action", s.sigma);
                    log::warn!("{msg}");
                    events.push(msg);
                    Decision {
                        action: fallback_action(),
                        params: None,
                    }
                }
            };
            if let (Some(a), Some(b)) = (decision.params, last_params) {
                let jump = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                if jump > opts.param_jump_warn {
                    log::warn!("parameter jump {jump:.3} at sigma {:.1}", s.sigma);
                }
            }
            let (ax, ay) = body_accelerations(&s, &decision.action, track, &cfg.vehicle)?;
            rows.push(LogRow {
                t: ticks as f64 / CONTROL_HZ,
                lap,
                state: s,
                action: decision.action,
                ax,
                ay,
                params: decision.params,
            });
            last_params = decision.params;
            for _ in 0..PLANT_SUBSTEPS {
                s = step_state(&s, &decision.action, CONTROL_DT / PLANT_SUBSTEPS as f64, track, &cfg.vehicle)?;
            }
            ticks += 1;
            if s.d.abs() > departure {
                events.push(format!("lap {lap}: lane departure at sigma {:.1} (d = {:.3})", s.sigma, s.d));
                failed = true;
                break 'laps;
            }
        }
    }
    Ok(RolloutLog {
        rows,
        meta: RolloutMeta {
            controller: controller.kind(),
            track_hash: track.hash(),
            options: opts.clone(),
            failed,
            fallbacks,
            events,
        },
    })
}

impl RolloutLog {
    pub fn has_params(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.params.is_some())
    }

    pub fn max_abs_offset(&self) -> f64 {
        self.rows.iter().map(|r| r.state.d.abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = "t,lap,vx,vy,psidot,sigma,d,theta,delta,ddelta,tr,ax,ay"
            .split(',')
            .map(String::from)
            .collect();
        let with_params = self.has_params();
        if with_params {
            header.extend(PARAM_NAMES.iter().map(|s| s.to_string()));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string(), r.lap.to_string()];
            rec.extend(r.state.to_array().iter().map(|v| v.to_string()));
            rec.extend([r.action.delta_rate, r.action.throttle, r.ax, r.ay].iter().map(|v| v.to_string()));
            if let (true, Some(p)) = (with_params, r.params) {
                rec.extend(p.iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, meta: RolloutMeta) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(input);
        let with_params = r.headers()?.len() == 13 + N_PARAMS;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, EvalError> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| EvalError::Invalid(format!("bad field {i} in log row {rec:?}")))
            };
            let state: Vec<f64> = (2..9).map(num).collect::<Result<_, _>>()?;
            let params = if with_params {
                let p: Vec<f64> = (13..13 + N_PARAMS).map(num).collect::<Result<_, _>>()?;
                Some(std::array::from_fn(|i| p[i]))
            } else {
                None
            };
            rows.push(LogRow {
                t: num(0)?,
                lap: num(1)? as usize,
                state: VehicleState::from_array(&state),
                action: ControlInput::new(num(9)?, num(10)?),
                ax: num(11)?,
                ay: num(12)?,
                params,
            });
        }
        Ok(Self { rows, meta })
    }

    /// Writes `<path>` (CSV) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        self.write_csv(std::fs::File::create(path)?)?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let meta: RolloutMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        Self::read_csv(std::fs::File::open(path)?, meta)
    }
}

pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Per-metre mean and population standard deviation of `vx, d, ax, ay`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPointStats {
    pub track_hash: String,
    pub bin_width: f64,
    /// `mean[state][bin]`, states ordered as [`EVAL_STATES`].
    pub mean: Vec<Vec<f64>>,
    pub sd: Vec<Vec<f64>>,
    /// Bins filled by interpolation.
    pub interpolated: usize,
}

impl TrackPointStats {
    pub fn n_bins(&self) -> usize {
        self.mean[0].len()
    }

    pub fn bin(&self, sigma: f64) -> usize {
        ((sigma / self.bin_width).floor().max(0.0) as usize).min(self.n_bins() - 1)
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("stats serialize")))
    }
}

/// One evaluated point `(σ, [vx, d, ax, ay])`.
pub type EvalPoint = (f64, [f64; 4]);

pub fn dataset_points(data: &Dataset, cfg: &NmpcConfig, track: &CurvatureProfile) -> Result<Vec<(usize, EvalPoint)>, EvalError> {
    data.samples
        .iter()
        .filter(|s| s.split != Split::Aug)
        .map(|s| {
            let (ax, ay) = body_accelerations(&s.state, &s.action_raw, track, &cfg.vehicle)?;
            Ok((s.lap, (s.state.sigma, [s.state.vx, s.state.d, ax, ay])))
        })
        .collect()
}

pub fn log_points(log: &RolloutLog) -> Vec<EvalPoint> {
    log.rows
        .iter()
        .map(|r| (r.state.sigma, [r.state.vx, r.state.d, r.ax, r.ay]))
        .collect()
}

/// Statistics over all laps of the demonstrations, binned at 1 m. Empty
/// bins are linearly interpolated from the nearest filled neighbours.
pub fn per_point_stats(data: &Dataset, cfg: &NmpcConfig, track: &CurvatureProfile) -> Result<TrackPointStats, EvalError> {
    let points = dataset_points(data, cfg, track)?;
    let laps: std::collections::BTreeSet<usize> = points.iter().map(|p| p.0).collect();
    if laps.len() < 2 {
        return Err(EvalError::Invalid(format!("statistics need at least 2 laps, got {}", laps.len())));
    }
    let pts: Vec<EvalPoint> = points.into_iter().map(|p| p.1).collect();
    stats_from_points(&pts, track)
}

pub fn stats_from_points(points: &[EvalPoint], track: &CurvatureProfile) -> Result<TrackPointStats, EvalError> {
    let n = track.total_length().ceil() as usize;
    let bin_width = 1.0;
    let mut sum = vec![[0.0; 4]; n];
    let mut count = vec![0usize; n];
    let index = |sigma: f64| ((sigma / bin_width).floor().max(0.0) as usize).min(n - 1);
    for (sigma, v) in points {
        let b = index(*sigma);
        count[b] += 1;
        for i in 0..4 {
            sum[b][i] += v[i];
        }
    }
    let mut mean = vec![vec![f64::NAN; n]; 4];
    for b in 0..n {
        if count[b] > 0 {
            for i in 0..4 {
                mean[i][b] = sum[b][i] / count[b] as f64;
            }
        }
    }
    let mut var = vec![[0.0; 4]; n];
    for (sigma, v) in points {
        let b = index(*sigma);
        for i in 0..4 {
            var[b][i] += (v[i] - mean[i][b]).powi(2);
        }
    }
    let mut sd = vec![vec![f64::NAN; n]; 4];
    for b in 0..n {
        if count[b] > 0 {
            for i in 0..4 {
                sd[i][b] = (var[b][i] / count[b] as f64).sqrt();
            }
        }
    }
    let filled: Vec<usize> = (0..n).filter(|&b| count[b] > 0).collect();
    if filled.is_empty() {
        return Err(EvalError::Invalid("no samples to build statistics".into()));
    }
    let interpolated = n - filled.len();
    if interpolated > 0 {
        log::info!("{interpolated} empty 1 m bins interpolated");
        for series in mean.iter_mut().chain(sd.iter_mut()) {
            fill_circular(series, &filled);
        }
    }
    Ok(TrackPointStats {
        track_hash: track.hash(),
        bin_width,
        mean,
        sd,
        interpolated,
    })
}

/// Linear interpolation around the lap between filled bins.
fn fill_circular(series: &mut [f64], filled: &[usize]) {
    let n = series.len();
    for (j, &a) in filled.iter().enumerate() {
        let b = filled[(j + 1) % filled.len()];
        let gap = (b + n - a) % n;
        let gap = if gap == 0 { n } else { gap };
        let (va, vb) = (series[a], series[b]);
        for k in 1..gap {
            series[(a + k) % n] = va + (vb - va) * k as f64 / gap as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    pub state: String,
    pub ae_mean: f64,
    pub ae_sd: f64,
    pub z_mean: f64,
    pub z_sd: f64,
    /// Fraction of grid points with `Z > 3`.
    pub z_exceedance: f64,
    /// `MZ > 2`.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationReport {
    pub controller: String,
    pub track_hash: String,
    pub stats_hash: String,
    pub grid_points: usize,
    pub states: Vec<StateMetrics>,
}

impl ImitationReport {
    pub fn metric(&self, state: &str) -> Option<&StateMetrics> {
        self.states.iter().find(|m| m.state == state)
    }

    pub fn mae(&self, state: &str) -> f64 {
        self.metric(state).map_or(f64::NAN, |m| m.ae_mean)
    }

    pub fn mz(&self, state: &str) -> f64 {
        self.metric(state).map_or(f64::NAN, |m| m.z_mean)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("controller {}  ({} grid points)\n", self.controller, self.grid_points);
        let _ = writeln!(s, "{:<6}{:>18}{:>18}{:>10}", "state", "AE mean±sd", "Z mean±sd", "Z>3");
        for m in &self.states {
            let _ = writeln!(
                s,
                "{:<6}{:>18}{:>18}{:>9.1}%{}",
                m.state,
                format!("{:.3}±{:.3}", m.ae_mean, m.ae_sd),
                format!("{:.3}±{:.3}", m.z_mean, m.z_sd),
                100.0 * m.z_exceedance,
                if m.flagged { "  [MZ>2]" } else { "" }
            );
        }
        s
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Absolute error and Z-score against the demonstration statistics.
/// Points of the log are averaged per grid bin first, then every visited
/// bin counts once.
pub fn imitation_metrics(controller: &str, points: &[EvalPoint], stats: &TrackPointStats) -> Result<ImitationReport, EvalError> {
    let mut bins: BTreeMap<usize, ([f64; 4], usize)> = BTreeMap::new();
    for (sigma, v) in points {
        let e = bins.entry(stats.bin(*sigma)).or_insert(([0.0; 4], 0));
        for i in 0..4 {
            e.0[i] += v[i];
        }
        e.1 += 1;
    }
    if bins.is_empty() {
        return Err(EvalError::Invalid("empty rollout log".into()));
    }
    let mut states = Vec::new();
    for (i, name) in EVAL_STATES.iter().enumerate() {
        let mut ae = Vec::with_capacity(bins.len());
        let mut z = Vec::with_capacity(bins.len());
        for (&b, (sum, count)) in &bins {
            let value = sum[i] / *count as f64;
            let err = (value - stats.mean[i][b]).abs();
            ae.push(err);
            z.push(err / stats.sd[i][b].max(SD_FLOOR));
        }
        let (ae_mean, ae_sd) = mean_sd(&ae);
        let (z_mean, z_sd) = mean_sd(&z);
        states.push(StateMetrics {
            state: name.to_string(),
            ae_mean,
            ae_sd,
            z_mean,
            z_sd,
            z_exceedance: z.iter().filter(|&&v| v > Z_EXCEEDANCE).count() as f64 / z.len() as f64,
            flagged: z_mean > MZ_FLAG,
        });
    }
    if states.iter().any(|m| !m.ae_mean.is_finite() || !m.z_mean.is_finite()) {
        return Err(EvalError::Invalid("non-finite metric".into()));
    }
    Ok(ImitationReport {
        controller: controller.to_string(),
        track_hash: stats.track_hash.clone(),
        stats_hash: stats.hash(),
        grid_points: bins.len(),
        states,
    })
}

/// Table II analogue: MAE/MZ per controller and the relative improvement
/// of the dynamic-parameter controller over each baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    /// `mae[state][column]`.
    pub mae: Vec<Vec<f64>>,
    pub mz: Vec<Vec<f64>>,
    /// `(baseline, state, MAE improvement %, MZ improvement %)`.
    pub improvements: Vec<(String, String, f64, f64)>,
    pub warnings: Vec<String>,
}

const COLUMN_ORDER: [&str; 4] = ["track", "sf", "static", "dynamic"];

/// Relative improvement of `ours` over `baseline`, percent.
pub fn improvement(baseline: f64, ours: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (baseline - ours) / baseline
    }
}

pub fn compare_report(reports: &[ImitationReport]) -> Result<ComparisonTable, EvalError> {
    let first = reports
        .first()
        .ok_or_else(|| EvalError::Invalid("no reports to compare".into()))?;
    for r in reports {
        if r.track_hash != first.track_hash {
            return Err(EvalError::TrackMismatch {
                expected: first.track_hash.clone(),
                found: r.track_hash.clone(),
            });
        }
        if r.stats_hash != first.stats_hash {
            return Err(EvalError::Invalid(format!(
                "report {} uses different demonstration statistics",
                r.controller
            )));
        }
    }
    let mut warnings = Vec::new();
    if reports.len() < 2 {
        warnings.push("only one report: nothing to compare".to_string());
    }
    let rank = |name: &str| COLUMN_ORDER.iter().position(|c| *c == name).unwrap_or(COLUMN_ORDER.len());
    let mut ordered: Vec<&ImitationReport> = reports.iter().collect();
    ordered.sort_by_key(|r| rank(&r.controller));
    let columns: Vec<String> = ordered.iter().map(|r| r.controller.clone()).collect();
    let mae = EVAL_STATES
        .iter()
        .map(|s| ordered.iter().map(|r| r.mae(s)).collect())
        .collect();
    let mz = EVAL_STATES
        .iter()
        .map(|s| ordered.iter().map(|r| r.mz(s)).collect())
        .collect();
    let mut improvements = Vec::new();
    if let Some(ours) = ordered.iter().find(|r| r.controller == "dynamic") {
        for base in ordered.iter().filter(|r| r.controller != "dynamic") {
            for s in EVAL_STATES {
                improvements.push((
                    base.controller.clone(),
                    s.to_string(),
                    improvement(base.mae(s), ours.mae(s)),
                    improvement(base.mz(s), ours.mz(s)),
                ));
            }
        }
    }
    Ok(ComparisonTable {
        columns,
        mae,
        mz,
        improvements,
        warnings,
    })
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "");
        for c in &self.columns {
            let _ = write!(s, "{:>22}", c.to_uppercase());
        }
        s.push('\n');
        let _ = write!(s, "{:<10}", "state");
        for _ in &self.columns {
            let _ = write!(s, "{:>11}{:>11}", "MAE", "MZ");
        }
        s.push('\n');
        for (i, state) in EVAL_STATES.iter().enumerate() {
            let _ = write!(s, "{:<10}", state);
            for j in 0..self.columns.len() {
                let flag = if self.mz[i][j] > MZ_FLAG { "*" } else { " " };
                let _ = write!(s, "{:>11.3}{:>10.3}{flag}", self.mae[i][j], self.mz[i][j]);
            }
            s.push('\n');
        }
        if !self.improvements.is_empty() {
            s.push_str("\nimprovement of DYNAMIC over baseline (MAE %, MZ %)\n");
            for (base, state, a, z) in &self.improvements {
                let _ = writeln!(s, "  vs {:<8}{:<4}{:>8.1}{:>8.1}", base.to_uppercase(), state, a, z);
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Data behind the state-trace figures: `μ ± SD` bands with the rollout's
/// per-bin mean.
pub fn write_state_traces<W: Write>(out: W, stats: &TrackPointStats, points: &[EvalPoint]) -> Result<(), EvalError> {
    let mut per_bin: BTreeMap<usize, ([f64; 4], usize)> = BTreeMap::new();
    for (sigma, v) in points {
        let e = per_bin.entry(stats.bin(*sigma)).or_insert(([0.0; 4], 0));
        for i in 0..4 {
            e.0[i] += v[i];
        }
        e.1 += 1;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sigma".to_string()];
    for s in EVAL_STATES {
        header.extend([format!("mean_{s}"), format!("sd_{s}"), format!("rollout_{s}")]);
    }
    w.write_record(&header)?;
    for b in 0..stats.n_bins() {
        let mut rec = vec![format!("{}", b as f64 * stats.bin_width)];
        for i in 0..4 {
            rec.push(stats.mean[i][b].to_string());
            rec.push(stats.sd[i][b].to_string());
            rec.push(per_bin.get(&b).map_or(String::new(), |(s, c)| (s[i] / *c as f64).to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Data behind the parameter-trace figures: `t, σ` and the six parameters.
pub fn write_param_traces<W: Write>(out: W, log: &RolloutLog) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "sigma".to_string()];
    header.extend(PARAM_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in &log.rows {
        if let Some(p) = r.params {
            let mut rec = vec![r.t.to_string(), r.state.sigma.to_string()];
            rec.extend(p.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
