//! Synthetic demonstrations: expert NMPCs with hidden parameter schedules
//! stand in for human drivers.
//!
//! The built-in schedules depend on the state only through the curvature
//! preview, so every expert is exactly representable by the feature
//! network. Numeric constants of the profiles are invented.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{closed_loop_rollout, sidecar, EvalError, ParamController, RolloutOptions};
use crate::nmpc::{solve_step, NmpcConfig, NmpcError, NmpcParams};
use crate::policy::{extract_features, FeatureNorm, FeatureVector, N_FEATURES, PREVIEW_OFFSETS};
use crate::track::CurvatureProfile;
use crate::vehicle::{ControlInput, VehicleState};

pub const DATASET_VERSION: u32 = 1;
/// Curvature below which a sample counts as straight driving.
pub const STRAIGHT_KAPPA: f64 = 1e-4;
/// Radius of the held-out curves.
pub const HELD_OUT_RADIUS: f64 = 110.0;
pub const PROFILE_NAMES: [&str; 4] = ["constant-fast", "constant-slow", "curve-oscillating", "inside-line"];
/// Largest augmentation offsets at unit magnitude.
pub const AUG_MAX_D: f64 = 0.3;
pub const AUG_MAX_THETA: f64 = 0.05;
/// Augmented offsets stay this far inside the lane edge.
const AUG_EDGE_CLEARANCE: f64 = 0.1;
const CSV_HEADER: &str = "lap,t,vx,vy,psidot,sigma,d,theta,delta,f0,f1,f2,f3,f4,f5,f6,f7,f8,f9,a0_raw,a1_raw,a0,a1,split";

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("unknown driver profile {0:?}")]
    UnknownProfile(String),
    #[error("{0}")]
    Invalid(String),
    #[error("expert failed: {0}")]
    Expert(String),
    #[error("dataset was generated on track {expected}, not {found}")]
    TrackMismatch { expected: String, found: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parameter schedule of an expert driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant { params: NmpcParams },
    /// Speed setpoint falls from `v_straight` to `v_curve` with the mean
    /// absolute curvature of the preview; the throttle weight vanishes
    /// while a curve is in view, so the car coasts into it and
    /// accelerates out of it.
    CurveSpeed {
        base: NmpcParams,
        v_straight: f64,
        v_curve: f64,
        kappa_ref: f64,
    },
    /// Lateral setpoint moves toward the inside of curves in view.
    InsideLine { base: NmpcParams, offset: f64, kappa_ref: f64 },
}

/// Mean preview curvature over `kappa_ref`, clamped to `[-1, 1]`.
fn curve_level(preview: &[f64], kappa_ref: f64) -> f64 {
    let mean = preview.iter().sum::<f64>() / preview.len() as f64;
    (mean / kappa_ref).clamp(-1.0, 1.0)
}

impl Schedule {
    pub fn params(&self, preview: &[f64]) -> NmpcParams {
        match *self {
            Schedule::Constant { params } => params,
            Schedule::CurveSpeed {
                base,
                v_straight,
                v_curve,
                kappa_ref,
            } => {
                let abs: Vec<f64> = preview.iter().map(|k| k.abs()).collect();
                let c = curve_level(&abs, kappa_ref);
                NmpcParams {
                    vx_bar: v_straight + (v_curve - v_straight) * c,
                    w_tr: base.w_tr * (1.0 - c),
                    ..base
                }
            }
            Schedule::InsideLine { base, offset, kappa_ref } => NmpcParams {
                d_bar: offset * curve_level(preview, kappa_ref),
                ..base
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    pub name: String,
    pub schedule: Schedule,
    /// Per-lap start-state jitter level.
    pub noise: f64,
    pub start_speed: f64,
}

fn base_params(vx_bar: f64) -> NmpcParams {
    NmpcParams {
        w_d: 1.0,
        d_bar: 0.0,
        w_v: 1.0,
        vx_bar,
        w_ddelta: 0.5,
        w_tr: 0.05,
    }
}

impl DriverProfile {
    pub fn builtin(name: &str) -> Result<Self, DemoError> {
        let (schedule, start_speed) = match name {
            "constant-fast" => (Schedule::Constant { params: base_params(20.0) }, 20.0),
            "constant-slow" => (Schedule::Constant { params: base_params(16.0) }, 16.0),
            "curve-oscillating" => (
                Schedule::CurveSpeed {
                    base: NmpcParams {
                        w_v: 2.0,
                        w_tr: 0.1,
                        ..base_params(20.0)
                    },
                    v_straight: 20.0,
                    v_curve: 15.0,
                    kappa_ref: 1.0 / 110.0,
                },
                20.0,
            ),
            "inside-line" => (
                Schedule::InsideLine {
                    base: base_params(18.0),
                    offset: 1.2,
                    kappa_ref: 1.0 / 110.0,
                },
                18.0,
            ),
            other => return Err(DemoError::UnknownProfile(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            schedule,
            noise: 0.5,
            start_speed,
        })
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn params(&self, s: &VehicleState, track: &CurvatureProfile) -> NmpcParams {
        self.schedule.params(&track.curvature_preview(s.sigma, &PREVIEW_OFFSETS))
    }

    pub fn validate(&self, cfg: &NmpcConfig, track: &CurvatureProfile) -> Result<(), DemoError> {
        let mut sigma = 0.0;
        while sigma < track.total_length() {
            self.params(&VehicleState::aligned(sigma, self.start_speed), track)
                .validate(cfg)
                .map_err(|e| DemoError::Invalid(format!("profile {} at sigma {sigma}: {e}", self.name)))?;
            sigma += 1.0;
        }
        if !(self.noise >= 0.0) {
            return Err(DemoError::Invalid(format!("negative noise level {}", self.noise)));
        }
        Ok(())
    }
}

/// Affine map of the actuator ranges onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub delta_rate: [f64; 2],
    pub throttle: [f64; 2],
}

impl ActionBounds {
    pub fn for_config(cfg: &NmpcConfig) -> Self {
        let r = cfg.vehicle.delta_rate_max;
        Self {
            delta_rate: [-r, r],
            throttle: [0.0, 1.0],
        }
    }

    fn ranges(&self) -> [[f64; 2]; 2] {
        [self.delta_rate, self.throttle]
    }

    /// Out-of-range actions are clamped (and logged).
    pub fn scale(&self, a: &ControlInput) -> [f64; 2] {
        let raw = a.to_array();
        let r = self.ranges();
        std::array::from_fn(|i| {
            let s = (raw[i] - r[i][0]) / (r[i][1] - r[i][0]);
            if !(0.0..=1.0).contains(&s) {
                log::warn!("action channel {i} = {} outside [{}, {}]; clamped", raw[i], r[i][0], r[i][1]);
            }
            s.clamp(0.0, 1.0)
        })
    }

    pub fn unscale(&self, a: &[f64; 2]) -> ControlInput {
        let r = self.ranges();
        ControlInput::from_array(&std::array::from_fn::<f64, 2, _>(|i| r[i][0] + a[i] * (r[i][1] - r[i][0])))
    }

    /// Width of each channel; the derivative of the raw action with
    /// respect to the scaled one.
    pub fn widths(&self) -> [f64; 2] {
        let r = self.ranges();
        [r[0][1] - r[0][0], r[1][1] - r[1][0]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Augmented copy of a training sample.
    Aug,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Aug => "aug",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test, Split::Aug]
            .into_iter()
            .find(|x| x.as_str() == s)
    }

    /// Samples used to fit the models.
    pub fn is_training(&self) -> bool {
        matches!(self, Split::Train | Split::Aug)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSample {
    pub lap: usize,
    pub t: f64,
    pub state: VehicleState,
    /// Raw (unnormalized) features.
    pub features: [f64; N_FEATURES],
    pub action_raw: ControlInput,
    /// Action scaled to `[0, 1]²`.
    pub action: [f64; 2],
    pub split: Split,
}

impl DemoSample {
    pub fn is_straight(&self, track: &CurvatureProfile) -> bool {
        track.curvature(self.state.sigma).abs() < STRAIGHT_KAPPA
    }

    pub fn feature_vector(&self, norm: &FeatureNorm) -> FeatureVector {
        FeatureVector::from_raw(self.features, norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub profile: DriverProfile,
    pub seed: u64,
    pub laps: usize,
    pub track_hash: String,
    pub bounds: ActionBounds,
    pub norm: FeatureNorm,
    pub nmpc: NmpcConfig,
    pub augmented: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<DemoSample>,
    pub meta: DatasetMeta,
}

fn make_sample(
    lap: usize,
    t: f64,
    state: VehicleState,
    action_raw: ControlInput,
    split: Split,
    bounds: &ActionBounds,
    track: &CurvatureProfile,
    norm: &FeatureNorm,
) -> DemoSample {
    DemoSample {
        lap,
        t,
        state,
        features: extract_features(&state, track, norm).raw,
        action_raw,
        action: bounds.scale(&action_raw),
        split,
    }
}

/// Roll out the expert on the plant for `laps` laps (restarting at the
/// start line each lap with jitter from `seed`) and record every step.
pub fn generate_demonstrations(
    profile: &DriverProfile,
    laps: usize,
    seed: u64,
    cfg: &NmpcConfig,
    track: &CurvatureProfile,
) -> Result<Dataset, DemoError> {
    if laps == 0 {
        return Err(DemoError::Invalid("at least one lap is required".into()));
    }
    profile.validate(cfg, track)?;
    let opts = RolloutOptions {
        laps,
        seed,
        start_speed: profile.start_speed,
        jitter: profile.noise,
        ..Default::default()
    };
    let mut expert = ParamController::expert(profile, cfg, track);
    let log = closed_loop_rollout(&mut expert, cfg, track, &opts)?;
    if log.meta.fallbacks > 0 || log.meta.failed {
        return Err(DemoError::Expert(log.meta.events.join("; ")));
    }
    let bounds = ActionBounds::for_config(cfg);
    let norm = FeatureNorm::for_config(cfg);
    let samples = log
        .rows
        .iter()
        .map(|r| make_sample(r.lap, r.t, r.state, r.action, Split::Train, &bounds, track, &norm))
        .collect();
    let mut data = Dataset {
        samples,
        meta: DatasetMeta {
            version: DATASET_VERSION,
            profile: profile.clone(),
            seed,
            laps,
            track_hash: track.hash(),
            bounds,
            norm,
            nmpc: cfg.clone(),
            augmented: 0,
        },
    };
    split(&mut data, track);
    Ok(data)
}

/// Tag samples inside the ±110 m curves (ramps included) as test on even
/// laps and val on odd laps; everything else not augmented is train.
pub fn split(data: &mut Dataset, track: &CurvatureProfile) {
    let held_out: Vec<_> = track
        .curves()
        .into_iter()
        .filter(|c| (c.radius().abs() - HELD_OUT_RADIUS).abs() < 1e-6)
        .collect();
    for s in &mut data.samples {
        if s.split == Split::Aug {
            continue;
        }
        let sigma = track.wrap(s.state.sigma);
        s.split = if held_out.iter().any(|c| c.contains(sigma)) {
            if s.lap % 2 == 0 {
                Split::Test
            } else {
                Split::Val
            }
        } else {
            Split::Train
        };
    }
}

/// Perturb `d` and `θ` of a random `fraction` of training samples and
/// label them by re-solving the expert. Samples whose re-solve fails are
/// skipped and logged.
pub fn augment(
    data: &Dataset,
    magnitude: f64,
    fraction: f64,
    seed: u64,
    track: &CurvatureProfile,
) -> Result<Dataset, DemoError> {
    if !(magnitude >= 0.0) || !(0.0..=1.0).contains(&fraction) {
        return Err(DemoError::Invalid(format!("bad augmentation magnitude {magnitude} / fraction {fraction}")));
    }
    let mut out = data.clone();
    if magnitude == 0.0 || fraction == 0.0 {
        return Ok(out);
    }
    let cfg = &data.meta.nmpc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edge = cfg.half_lane() - AUG_EDGE_CLEARANCE;
    let mut skipped = 0;
    for s in data.samples.iter().filter(|s| s.split == Split::Train) {
        if rng.gen::<f64>() >= fraction {
            continue;
        }
        let mut state = s.state;
        state.d = (state.d + rng.gen_range(-1.0..=1.0) * AUG_MAX_D * magnitude).clamp(-edge, edge);
        state.theta += rng.gen_range(-1.0..=1.0) * AUG_MAX_THETA * magnitude;
        let p = data.meta.profile.params(&state, track);
        match solve_step(&state, &p, None, cfg, track) {
            Ok(sol) => {
                out.samples.push(make_sample(
                    s.lap,
                    s.t,
                    state,
                    sol.action,
                    Split::Aug,
                    &data.meta.bounds,
                    track,
                    &data.meta.norm,
                ));
                out.meta.augmented += 1;
            }
            Err(e) => {
                skipped += 1;
                log::info!("augmentation at sigma {:.1} skipped: {}", state.sigma, short(&e));
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} augmented samples skipped");
    }
    Ok(out)
}

fn short(e: &NmpcError) -> String {
    match e {
        NmpcError::NotConverged { status, residual, .. } => format!("{status:?} (residual {residual:.2e})"),
        other => other.to_string(),
    }
}

/// Down-sample the larger of the straight/curved groups and up-sample the
/// smaller (with replacement) to a common size. Order of the retained
/// samples is preserved.
pub fn balance(data: &Dataset, seed: u64, track: &CurvatureProfile) -> Dataset {
    let (straight, curved): (Vec<usize>, Vec<usize>) =
        (0..data.samples.len()).partition(|&i| data.samples[i].is_straight(track));
    let mut out = data.clone();
    if straight.is_empty() || curved.is_empty() {
        log::warn!("balance: {} straight / {} curved samples; nothing to balance", straight.len(), curved.len());
        return out;
    }
    let target = (straight.len() + curved.len()) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resample = |group: &[usize]| -> Vec<usize> {
        if group.len() >= target {
            let mut keep: Vec<usize> = group.choose_multiple(&mut rng, target).copied().collect();
            keep.sort_unstable();
            keep
        } else {
            let mut all = group.to_vec();
            all.extend((0..target - group.len()).map(|_| group[rng.gen_range(0..group.len())]));
            all.sort_unstable();
            all
        }
    };
    let mut keep = resample(&straight);
    keep.extend(resample(&curved));
    keep.sort_unstable();
    out.samples = keep.into_iter().map(|i| data.samples[i].clone()).collect();
    out
}

impl Dataset {
    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn subset(&self, keep: impl Fn(&DemoSample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn check_track(&self, track: &CurvatureProfile) -> Result<(), DemoError> {
        let found = track.hash();
        if found != self.meta.track_hash {
            return Err(DemoError::TrackMismatch {
                expected: self.meta.track_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Scaled actions lie in `[0, 1]²` and the stored features match the
    /// stored states to `tol`.
    pub fn validate(&self, track: &CurvatureProfile, tol: f64) -> Result<(), DemoError> {
        self.check_track(track)?;
        for (i, s) in self.samples.iter().enumerate() {
            if s.action.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(DemoError::Invalid(format!("sample {i}: scaled action {:?} outside [0, 1]", s.action)));
            }
            let f = extract_features(&s.state, track, &self.meta.norm).raw;
            if f.iter().zip(&s.features).any(|(a, b)| (a - b).abs() > tol) {
                return Err(DemoError::Invalid(format!("sample {i}: features do not match the state")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DemoError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER.split(','))?;
        for s in &self.samples {
            let mut rec = vec![s.lap.to_string(), s.t.to_string()];
            rec.extend(s.state.to_array().iter().map(|v| v.to_string()));
            rec.extend(s.features.iter().map(|v| v.to_string()));
            rec.extend(s.action_raw.to_array().iter().map(|v| v.to_string()));
            rec.extend(s.action.iter().map(|v| v.to_string()));
            rec.push(s.split.as_str().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, meta: DatasetMeta) -> Result<Self, DemoError> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header.join(",") != CSV_HEADER {
            return Err(DemoError::Invalid(format!("unexpected dataset header {:?}", header.join(","))));
        }
        let mut samples = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, DemoError> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DemoError::Invalid(format!("row {row}: bad field {}", header[i])))
            };
            let v: Vec<f64> = (0..23).map(num).collect::<Result<_, _>>()?;
            let split = rec
                .get(23)
                .and_then(Split::parse)
                .ok_or_else(|| DemoError::Invalid(format!("row {row}: bad split")))?;
            samples.push(DemoSample {
                lap: v[0] as usize,
                t: v[1],
                state: VehicleState::from_array(&v[2..9]),
                features: std::array::from_fn(|i| v[9 + i]),
                action_raw: ControlInput::new(v[19], v[20]),
                action: [v[21], v[22]],
                split,
            });
        }
        Ok(Self { samples, meta })
    }

    /// Writes `<path>` (CSV) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<(), DemoError> {
        self.write_csv(std::fs::File::create(path)?)?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DemoError> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        if meta.version != DATASET_VERSION {
            return Err(DemoError::Invalid(format!("unsupported dataset version {}", meta.version)));
        }
        Self::read_csv(std::fs::File::open(path)?, meta)
    }
}
