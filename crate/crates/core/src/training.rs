//! Behavioral cloning through the differentiable NMPC, plus the baseline
//! training modes.
//!
//! The `dynamic` mode first regresses the expert's cost parameters
//! directly, then fine-tunes end to end: policy forward, NMPC solve,
//! squared error on the scaled first action, adjoint back to the
//! parameters and backpropagation into the network.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{ActionBounds, Dataset, DemoError, DemoSample, Split};
use crate::nmpc::{
    action_cotangent, solve_problem, transcribe, NmpcConfig, NmpcError, NmpcParams, N_PARAMS,
};
use crate::policy::{action_heads, param_heads, Head, setpoint_heads, PolicyError, PolicyWeights, HIDDEN_SIZES, N_FEATURES};
use crate::track::CurvatureProfile;
use crate::vehicle::{ControlInput, VehicleState};

/// Steps between a sample and its setpoint label in track mode.
pub const TRACK_LABEL_STEPS: usize = 15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("every sample of a batch was skipped")]
    AllSkipped,
    #[error("epoch {epoch}: {skipped} of {total} samples skipped (limit {limit:.0}%)")]
    Degenerate {
        epoch: usize,
        skipped: usize,
        total: usize,
        limit: f64,
    },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("no usable training samples")]
    NoSamples,
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// State-dependent cost parameters, trained through the NMPC.
    Dynamic,
    /// Future `[d, vx]` setpoints for the tracking NMPC.
    Track,
    /// Raw `[δ, t_r]` actions, filtered at run time.
    Sf,
    /// One constant parameter vector.
    Static,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrainMode::Dynamic => "dynamic",
            TrainMode::Track => "track",
            TrainMode::Sf => "sf",
            TrainMode::Static => "static",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Epochs of the main phase (end-to-end, regression or static fit).
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Parameter-regression epochs run before the end-to-end phase.
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    /// Factor applied to the learning rate after every epoch.
    pub lr_decay: f64,
    /// Cap on samples per epoch for phases that solve the NMPC.
    pub max_samples: Option<usize>,
    pub max_val_samples: Option<usize>,
    pub max_skip_ratio: f64,
    pub hidden: Vec<usize>,
    /// Starting point of the static fit.
    pub static_init: Option<NmpcParams>,
    /// Continue from an existing checkpoint and report.
    pub resume: bool,
    /// Worker threads for per-sample solves.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dynamic,
            epochs: 10,
            batch_size: 10,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            dataset: PathBuf::new(),
            checkpoint: PathBuf::new(),
            pretrain_epochs: 0,
            pretrain_learning_rate: 1e-3,
            lr_decay: 1.0,
            max_samples: None,
            max_val_samples: None,
            max_skip_ratio: 0.2,
            hidden: HIDDEN_SIZES.to_vec(),
            static_init: None,
            resume: false,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.pretrain_learning_rate > 0.0 && self.pretrain_learning_rate.is_finite()) {
            return bad("pretrain learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning rate decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam moments must lie in [0, 1) and epsilon be positive");
        }
        if !(0.0..=1.0).contains(&self.max_skip_ratio) {
            return bad("max skip ratio must lie in [0, 1]");
        }
        if self.max_samples == Some(0) {
            return bad("max samples must be at least 1");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub processed: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub processed: usize,
    pub skipped: usize,
    pub skip_ratio: f64,
    /// Epoch whose weights were kept; `None` when no epoch beat the
    /// starting point.
    pub best_epoch: Option<usize>,
    pub checkpoint_hash: String,
    pub static_params: Option<NmpcParams>,
    pub wall_time: f64,
}

impl TrainReport {
    fn new(mode: TrainMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            epochs: Vec::new(),
            processed: 0,
            skipped: 0,
            skip_ratio: 0.0,
            best_epoch: None,
            checkpoint_hash: String::new(),
            static_params: None,
            wall_time: 0.0,
        }
    }

    fn next_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch + 1)
    }

    fn push(&mut self, rec: EpochRecord) {
        log::info!(
            "epoch {} [{}] train {:.6e} val {} ({} skipped)",
            rec.epoch,
            rec.phase,
            rec.train_loss,
            rec.val_loss.map_or("-".to_string(), |v| format!("{v:.6e}")),
            rec.skipped
        );
        self.processed += rec.processed;
        self.skipped += rec.skipped;
        let total = self.processed + self.skipped;
        self.skip_ratio = if total == 0 { 0.0 } else { self.skipped as f64 / total as f64 };
        self.epochs.push(rec);
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "phase", "train_loss", "val_loss", "processed", "skipped"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.phase.clone(),
                e.train_loss.to_string(),
                e.val_loss.map_or(String::new(), |v| v.to_string()),
                e.processed.to_string(),
                e.skipped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<checkpoint>.report.json` and `<checkpoint>.epochs.csv`.
    pub fn save(&self, checkpoint: &Path) -> Result<(), TrainError> {
        std::fs::write(report_path(checkpoint), serde_json::to_string_pretty(self)? + "\n")?;
        self.write_csv(std::fs::File::create(with_suffix(checkpoint, ".epochs.csv"))?)?;
        Ok(())
    }

    pub fn load(checkpoint: &Path) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(report_path(checkpoint))?)?)
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn report_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".report.json")
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
}

impl AdamConfig {
    pub fn from_train(cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            decay: cfg.lr_decay,
        }
    }

    /// Settings for the `e`-th epoch of a phase.
    pub fn at_epoch(&self, e: usize) -> Self {
        Self {
            lr: self.lr * self.decay.powi(e as i32),
            ..*self
        }
    }
}

/// One bias-corrected Adam update of `x` in place.
pub fn adam_step(x: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), TrainError> {
    assert_eq!(x.len(), grad.len());
    assert_eq!(x.len(), state.m.len());
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite(format!("gradient entry {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..x.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        x[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Scaled action in `[0, 1]²`, without clamping.
fn scaled_action(a: &ControlInput, bounds: &ActionBounds) -> [f64; 2] {
    let w = bounds.widths();
    [
        (a.delta_rate - bounds.delta_rate[0]) / w[0],
        (a.throttle - bounds.throttle[0]) / w[1],
    ]
}

/// BC loss of one sample under parameters `p` and its gradient over `p`.
pub fn sample_loss_and_param_grad(
    state: &VehicleState,
    target: &[f64; 2],
    p: &[f64],
    cfg: &NmpcConfig,
    bounds: &ActionBounds,
    track: &CurvatureProfile,
) -> Result<(f64, Vec<f64>), NmpcError> {
    NmpcParams::from_array(p).validate(cfg)?;
    let problem = transcribe(state, cfg, track)?;
    let sol = solve_problem(&problem, p, None)?;
    let a = scaled_action(&sol.action, bounds);
    let w = bounds.widths();
    let r = [a[0] - target[0], a[1] - target[1]];
    let loss = r[0] * r[0] + r[1] * r[1];
    let abar = [2.0 * r[0] / w[0], 2.0 * r[1] / w[1]];
    let grad = action_cotangent(&sol, &problem, &abar)?;
    Ok((loss, grad))
}

/// BC loss alone, for finite differences and validation.
pub fn sample_loss(
    state: &VehicleState,
    target: &[f64; 2],
    p: &[f64],
    cfg: &NmpcConfig,
    bounds: &ActionBounds,
    track: &CurvatureProfile,
) -> Result<f64, NmpcError> {
    NmpcParams::from_array(p).validate(cfg)?;
    let problem = transcribe(state, cfg, track)?;
    let sol = solve_problem(&problem, p, None)?;
    let a = scaled_action(&sol.action, bounds);
    Ok((a[0] - target[0]).powi(2) + (a[1] - target[1]).powi(2))
}

/// Batch loss and averaged gradient with skip accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub processed: usize,
    pub skipped: usize,
}

/// Runs `f` over `items`, on `jobs` threads when more than one, keeping
/// the input order in the output.
fn map_ordered<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// BC loss of a batch under the policy and its gradient over the
/// flattened weights. Samples whose solve or sensitivity fails are
/// skipped and counted.
pub fn bc_loss_and_grad(
    weights: &PolicyWeights,
    batch: &[&DemoSample],
    cfg: &NmpcConfig,
    bounds: &ActionBounds,
    track: &CurvatureProfile,
    jobs: usize,
) -> Result<BatchGrad, TrainError> {
    let results = map_ordered(batch, jobs, |s| -> Result<Option<(f64, Vec<f64>)>, TrainError> {
        let pass = weights.forward(&s.feature_vector(&weights.norm).normalized)?;
        match sample_loss_and_param_grad(&s.state, &s.action, pass.output(), cfg, bounds, track) {
            Ok((loss, gp)) => Ok(Some((loss, weights.backward(&pass, &gp)))),
            Err(e) => {
                log::debug!("skipping sample at t={} lap {}: {e}", s.t, s.lap);
                Ok(None)
            }
        }
    });
    let mut out = BatchGrad {
        loss: 0.0,
        grad: vec![0.0; weights.n_params()],
        processed: 0,
        skipped: 0,
    };
    for r in results {
        match r? {
            Some((loss, g)) => {
                out.loss += loss;
                for (a, b) in out.grad.iter_mut().zip(&g) {
                    *a += b;
                }
                out.processed += 1;
            }
            None => out.skipped += 1,
        }
    }
    if out.processed == 0 {
        return Err(TrainError::AllSkipped);
    }
    let n = out.processed as f64;
    out.loss /= n;
    out.grad.iter_mut().for_each(|g| *g /= n);
    Ok(out)
}

/// Mean BC loss of a fixed parameter vector over samples, with the
/// number skipped.
pub fn static_bc_loss(
    p: &NmpcParams,
    samples: &[&DemoSample],
    cfg: &NmpcConfig,
    bounds: &ActionBounds,
    track: &CurvatureProfile,
    jobs: usize,
) -> (f64, usize) {
    let losses = map_ordered(samples, jobs, |s| sample_loss(&s.state, &s.action, &p.to_array(), cfg, bounds, track).ok());
    mean_some(&losses)
}

fn mean_some(values: &[Option<f64>]) -> (f64, usize) {
    let ok: Vec<f64> = values.iter().flatten().copied().collect();
    let skipped = values.len() - ok.len();
    if ok.is_empty() {
        (f64::NAN, skipped)
    } else {
        (ok.iter().sum::<f64>() / ok.len() as f64, skipped)
    }
}

/// Mean BC loss of a policy over samples, with the number skipped.
pub fn policy_bc_loss(
    weights: &PolicyWeights,
    samples: &[&DemoSample],
    cfg: &NmpcConfig,
    bounds: &ActionBounds,
    track: &CurvatureProfile,
    jobs: usize,
) -> (f64, usize) {
    let losses = map_ordered(samples, jobs, |s| {
        let pass = weights.forward(&s.feature_vector(&weights.norm).normalized).ok()?;
        sample_loss(&s.state, &s.action, pass.output(), cfg, bounds, track).ok()
    });
    mean_some(&losses)
}

/// Normalization of the six cost parameters in the regression phase.
pub fn param_scale(cfg: &NmpcConfig) -> [f64; N_PARAMS] {
    let (_, dhi) = cfg.d_bar_bounds();
    let (vlo, vhi) = cfg.vx_bar_bounds();
    [1.0, dhi, 1.0, 0.5 * (vhi - vlo), 1.0, 0.1]
}

/// Plain supervised pairs for the regression phases.
struct Regression {
    inputs: Vec<[f64; N_FEATURES]>,
    targets: Vec<Vec<f64>>,
    scale: Vec<f64>,
}

impl Regression {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    /// Offset heads are fitted on their output. Weight heads are fitted on
    /// the pre-activation, with no loss when both it and the target are
    /// non-positive, so a head that is pushed below zero can come back.
    fn loss_and_grad(&self, w: &PolicyWeights, idx: &[usize]) -> Result<(f64, Vec<f64>), TrainError> {
        let mut grad = vec![0.0; w.n_params()];
        let mut loss = 0.0;
        for &i in idx {
            let pass = w.forward(&self.inputs[i])?;
            let (out, pre) = (pass.output(), pass.pre_output());
            let mut g = vec![0.0; out.len()];
            for k in 0..out.len() {
                let t = self.targets[i][k];
                let r = match w.heads[k] {
                    Head::Weight if t <= 0.0 && pre[k] <= 0.0 => 0.0,
                    Head::Weight => (pre[k] - t) / self.scale[k],
                    Head::Offset { .. } => (out[k] - t) / self.scale[k],
                };
                loss += r * r;
                g[k] = 2.0 * r / self.scale[k] * if matches!(w.heads[k], Head::Weight) { 1.0 } else { w.heads[k].derivative(pre[k]) };
            }
            for (a, b) in grad.iter_mut().zip(w.backward_pre(&pass, &g)) {
                *a += b;
            }
        }
        let n = idx.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    fn loss(&self, w: &PolicyWeights) -> Result<Option<f64>, TrainError> {
        if self.len() == 0 {
            return Ok(None);
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok(Some(self.loss_and_grad(w, &idx)?.0))
    }
}

fn normalized_inputs(samples: &[&DemoSample], w: &PolicyWeights) -> Vec<[f64; N_FEATURES]> {
    samples.iter().map(|s| s.feature_vector(&w.norm).normalized).collect()
}

/// Regression targets `[d, vx]` taken `TRACK_LABEL_STEPS` samples ahead
/// within the same lap; samples without a future are `None`.
pub fn track_labels(data: &Dataset) -> Vec<Option<[f64; 2]>> {
    let dt = data.meta.nmpc.dt;
    let horizon = TRACK_LABEL_STEPS as f64 * dt;
    let mut out = vec![None; data.samples.len()];
    for (i, s) in data.samples.iter().enumerate() {
        if s.split == Split::Aug {
            continue;
        }
        if let Some(f) = data.samples.get(i + TRACK_LABEL_STEPS) {
            if f.lap == s.lap && f.split != Split::Aug && ((f.t - s.t) - horizon).abs() < 0.5 * dt {
                out[i] = Some([f.state.d, f.state.vx]);
            }
        }
    }
    out
}

/// Steering angle and throttle the expert commanded over the next
/// period, the targets of the filtered baseline.
pub fn sf_target(s: &DemoSample, cfg: &NmpcConfig) -> [f64; 2] {
    [s.state.delta + cfg.dt * s.action_raw.delta_rate, s.action_raw.throttle]
}

/// Errors on `[δ, t_r]` are weighted so that they match errors in the
/// scaled action after conversion to a steering rate.
pub fn sf_scale(cfg: &NmpcConfig, bounds: &ActionBounds) -> [f64; 2] {
    let w = bounds.widths();
    [cfg.dt * w[0], w[1]]
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Returns the weights of the epoch with the lowest validation loss and
/// its number; the final weights when there is no validation set.
fn run_regression(
    weights: &mut PolicyWeights,
    train: &Regression,
    val: &Regression,
    epochs: usize,
    adam: AdamConfig,
    batch: usize,
    phase: &str,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<(PolicyWeights, Option<usize>), TrainError> {
    if train.len() == 0 {
        return Err(TrainError::NoSamples);
    }
    let mut state = AdamState::new(weights.n_params());
    let mut flat = weights.to_flat();
    let mut best: (Option<f64>, PolicyWeights, Option<usize>) = (None, weights.clone(), None);
    for e in 0..epochs {
        let step = adam.at_epoch(e);
        let order = shuffled(train.len(), rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, grad) = train.loss_and_grad(weights, chunk)?;
            total += loss * chunk.len() as f64;
            adam_step(&mut flat, &grad, &mut state, &step)?;
            weights.set_flat(&flat);
        }
        let rec = EpochRecord {
            epoch: report.next_epoch(),
            phase: phase.to_string(),
            train_loss: total / train.len() as f64,
            val_loss: val.loss(weights)?,
            processed: train.len(),
            skipped: 0,
        };
        let better = match (rec.val_loss, best.0) {
            (Some(v), Some(b)) => v < b,
            _ => true,
        };
        if better {
            best = (rec.val_loss, weights.clone(), Some(rec.epoch));
        }
        report.push(rec);
    }
    Ok((best.1, best.2))
}

fn limited<'a>(samples: &[&'a DemoSample], cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<&'a DemoSample> {
    match cap {
        Some(c) if c < samples.len() => {
            let mut idx = shuffled(samples.len(), rng);
            idx.truncate(c);
            idx.sort_unstable();
            idx.into_iter().map(|i| samples[i]).collect()
        }
        _ => samples.to_vec(),
    }
}

fn check_skips(epoch: usize, skipped: usize, total: usize, cfg: &TrainConfig) -> Result<(), TrainError> {
    if total > 0 && skipped as f64 > cfg.max_skip_ratio * total as f64 {
        return Err(TrainError::Degenerate {
            epoch,
            skipped,
            total,
            limit: 100.0 * cfg.max_skip_ratio,
        });
    }
    Ok(())
}

/// Trained weights with their report.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: PolicyWeights,
    pub report: TrainReport,
}

fn split_samples(data: &Dataset) -> (Vec<&DemoSample>, Vec<&DemoSample>) {
    let train = data.samples.iter().filter(|s| s.split.is_training()).collect();
    let val = data.samples.iter().filter(|s| s.split == Split::Val).collect();
    (train, val)
}

fn fresh_network(cfg: &TrainConfig, data: &Dataset) -> PolicyWeights {
    let nmpc = &data.meta.nmpc;
    let heads = match cfg.mode {
        TrainMode::Dynamic | TrainMode::Static => param_heads(nmpc),
        TrainMode::Track => setpoint_heads(nmpc),
        TrainMode::Sf => action_heads(nmpc),
    };
    let mut sizes = vec![N_FEATURES];
    sizes.extend(&cfg.hidden);
    PolicyWeights::zeros(&sizes, heads, data.meta.norm.clone()).init_weights(cfg.seed)
}

/// Trains a model on `data`; `resume` continues from earlier weights and
/// report, skipping the pretraining phase.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    track: &CurvatureProfile,
    resume: Option<(PolicyWeights, TrainReport)>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    data.check_track(track)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let resumed = resume.is_some();
    let (weights, mut report) = match resume {
        Some((w, r)) => {
            if r.mode != cfg.mode {
                return Err(TrainError::Config(format!("cannot resume a {} run in {} mode", r.mode, cfg.mode)));
            }
            (w, r)
        }
        None => (fresh_network(cfg, data), TrainReport::new(cfg.mode, cfg.seed)),
    };
    let mut outcome = match cfg.mode {
        TrainMode::Dynamic => train_dynamic(cfg, data, track, weights, &mut report, resumed, &mut rng)?,
        TrainMode::Track => train_track_mode(cfg, data, weights, &mut report, &mut rng)?,
        TrainMode::Sf => train_sf_mode(cfg, data, weights, &mut report, &mut rng)?,
        TrainMode::Static => {
            let init = match (resumed, report.static_params, cfg.static_init) {
                (true, Some(p), _) => p,
                (_, _, Some(p)) => p,
                _ => default_static_init(&data.meta.nmpc, data),
            };
            let p = fit_static_params(data, cfg, track, init, &mut report, &mut rng)?;
            report.static_params = Some(p);
            TrainOutcome {
                weights: PolicyWeights::constant(&p.to_array(), param_heads(&data.meta.nmpc), data.meta.norm.clone()),
                report: report.clone(),
            }
        }
    };
    outcome.report.wall_time = start.elapsed().as_secs_f64();
    outcome.report.checkpoint_hash = outcome.weights.hash();
    Ok(outcome)
}

fn train_dynamic(
    cfg: &TrainConfig,
    data: &Dataset,
    track: &CurvatureProfile,
    mut weights: PolicyWeights,
    report: &mut TrainReport,
    resumed: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    let nmpc = &data.meta.nmpc;
    let bounds = &data.meta.bounds;
    let (train, val) = split_samples(data);
    if train.is_empty() {
        return Err(TrainError::NoSamples);
    }
    if !resumed && cfg.pretrain_epochs > 0 {
        let scale = param_scale(nmpc).to_vec();
        let make = |s: &[&DemoSample]| Regression {
            inputs: normalized_inputs(s, &weights),
            targets: s
                .iter()
                .map(|x| data.meta.profile.params(&x.state, track).to_array().to_vec())
                .collect(),
            scale: scale.clone(),
        };
        let (rt, rv) = (make(&train), make(&val));
        let adam = AdamConfig::from_train(cfg, cfg.pretrain_learning_rate);
        run_regression(&mut weights, &rt, &rv, cfg.pretrain_epochs, adam, cfg.batch_size, "pretrain", rng, report)?;
    }

    let val_set = limited(&val, cfg.max_val_samples, rng);
    let val_loss = |w: &PolicyWeights| -> Option<f64> {
        if val_set.is_empty() {
            None
        } else {
            Some(policy_bc_loss(w, &val_set, nmpc, bounds, track, cfg.jobs).0)
        }
    };
    let mut best = (val_loss(&weights), weights.clone(), None);
    let adam = AdamConfig::from_train(cfg, cfg.learning_rate);
    let mut state = AdamState::new(weights.n_params());
    let mut flat = weights.to_flat();
    for e in 0..cfg.epochs {
        let step = adam.at_epoch(e);
        let epoch = report.next_epoch();
        let used = limited(&train, cfg.max_samples, rng);
        let order = shuffled(used.len(), rng);
        let (mut total, mut processed, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DemoSample> = chunk.iter().map(|&i| used[i]).collect();
            match bc_loss_and_grad(&weights, &batch, nmpc, bounds, track, cfg.jobs) {
                Ok(g) => {
                    total += g.loss * g.processed as f64;
                    processed += g.processed;
                    skipped += g.skipped;
                    adam_step(&mut flat, &g.grad, &mut state, &step)?;
                    weights.set_flat(&flat);
                }
                Err(TrainError::AllSkipped) => skipped += batch.len(),
                Err(e) => return Err(e),
            }
        }
        check_skips(epoch, skipped, used.len(), cfg)?;
        let v = val_loss(&weights);
        report.push(EpochRecord {
            epoch,
            phase: "bc".into(),
            train_loss: if processed > 0 { total / processed as f64 } else { f64::NAN },
            val_loss: v,
            processed,
            skipped,
        });
        // without a validation split the latest weights are kept
        let better = match (v, best.0) {
            (Some(v), Some(b)) => v < b,
            _ => true,
        };
        if better {
            best = (v, weights.clone(), Some(epoch));
        }
    }
    if cfg.epochs > 0 {
        report.best_epoch = best.2;
    }
    Ok(TrainOutcome {
        weights: best.1,
        report: report.clone(),
    })
}

/// Regression of the `[d, vx]` state 1.5 s ahead from the features.
pub fn train_track_mode(
    cfg: &TrainConfig,
    data: &Dataset,
    mut weights: PolicyWeights,
    report: &mut TrainReport,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    let nmpc = &data.meta.nmpc;
    let labels = track_labels(data);
    let (_, dhi) = nmpc.d_bar_bounds();
    let (vlo, vhi) = nmpc.vx_bar_bounds();
    let scale = param_scale(nmpc);
    let make = |keep: &dyn Fn(&DemoSample) -> bool| {
        let mut r = Regression {
            inputs: Vec::new(),
            targets: Vec::new(),
            scale: vec![scale[1], scale[3]],
        };
        for (s, l) in data.samples.iter().zip(&labels) {
            if let (Some(l), true) = (l, keep(s)) {
                r.inputs.push(s.feature_vector(&weights.norm).normalized);
                r.targets.push(vec![l[0].clamp(-dhi, dhi), l[1].clamp(vlo, vhi)]);
            }
        }
        r
    };
    let train = make(&|s| s.split.is_training());
    let val = make(&|s| s.split == Split::Val);
    let dropped = labels.iter().filter(|l| l.is_none()).count();
    log::info!("track mode: {} labelled samples, {dropped} without a future", train.len() + val.len());
    let adam = AdamConfig::from_train(cfg, cfg.learning_rate);
    let (best, epoch) = run_regression(&mut weights, &train, &val, cfg.epochs, adam, cfg.batch_size, "regress", rng, report)?;
    report.best_epoch = epoch;
    Ok(TrainOutcome {
        weights: best,
        report: report.clone(),
    })
}

/// Regression of the expert's `[δ, t_r]` from the features.
pub fn train_sf_mode(
    cfg: &TrainConfig,
    data: &Dataset,
    mut weights: PolicyWeights,
    report: &mut TrainReport,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    let nmpc = &data.meta.nmpc;
    let scale = sf_scale(nmpc, &data.meta.bounds).to_vec();
    let make = |keep: &dyn Fn(&DemoSample) -> bool| {
        let picked: Vec<&DemoSample> = data.samples.iter().filter(|s| keep(s)).collect();
        Regression {
            inputs: normalized_inputs(&picked, &weights),
            targets: picked.iter().map(|s| sf_target(s, nmpc).to_vec()).collect(),
            scale: scale.clone(),
        }
    };
    let train = make(&|s| s.split.is_training());
    let val = make(&|s| s.split == Split::Val);
    let adam = AdamConfig::from_train(cfg, cfg.learning_rate);
    let (best, epoch) = run_regression(&mut weights, &train, &val, cfg.epochs, adam, cfg.batch_size, "regress", rng, report)?;
    report.best_epoch = epoch;
    Ok(TrainOutcome {
        weights: best,
        report: report.clone(),
    })
}

/// Start of a static fit: unit tracking weights and the mean speed of the
/// training samples as the speed target. Starting far from the driven
/// speed pins the throttle at a bound where the action has no gradient.
pub fn default_static_init(cfg: &NmpcConfig, data: &Dataset) -> NmpcParams {
    let (vlo, vhi) = cfg.vx_bar_bounds();
    let (train, _) = split_samples(data);
    let mean = if train.is_empty() {
        0.5 * (vlo + vhi)
    } else {
        train.iter().map(|s| s.state.vx).sum::<f64>() / train.len() as f64
    };
    NmpcParams {
        w_d: 1.0,
        d_bar: 0.0,
        w_v: 1.0,
        vx_bar: mean.clamp(vlo, vhi),
        w_ddelta: 0.5,
        w_tr: 0.05,
    }
}

/// Fits one parameter vector by BC through the NMPC. Adam runs in
/// coordinates normalized by [`param_scale`] and every step is projected
/// back onto the valid set. Returns the iterate with the lowest
/// validation loss (or the last one without a validation split).
pub fn fit_static_params(
    data: &Dataset,
    cfg: &TrainConfig,
    track: &CurvatureProfile,
    init: NmpcParams,
    report: &mut TrainReport,
    rng: &mut ChaCha8Rng,
) -> Result<NmpcParams, TrainError> {
    let nmpc = &data.meta.nmpc;
    let bounds = &data.meta.bounds;
    init.validate(nmpc)?;
    let (train, val) = split_samples(data);
    if train.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let val_set = limited(&val, cfg.max_val_samples, rng);
    let scale = param_scale(nmpc);
    let mut p = init;
    let mut q: Vec<f64> = p.to_array().iter().zip(&scale).map(|(v, s)| v / s).collect();
    let adam = AdamConfig::from_train(cfg, cfg.learning_rate);
    let mut state = AdamState::new(N_PARAMS);
    let val_loss = |p: &NmpcParams| -> Option<f64> {
        (!val_set.is_empty()).then(|| static_bc_loss(p, &val_set, nmpc, bounds, track, cfg.jobs).0)
    };
    let mut best = (val_loss(&p), p, None);
    for e in 0..cfg.epochs {
        let step = adam.at_epoch(e);
        let epoch = report.next_epoch();
        let used = limited(&train, cfg.max_samples, rng);
        let order = shuffled(used.len(), rng);
        let (mut total, mut processed, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let pa = p.to_array();
            let results = map_ordered(chunk, cfg.jobs, |&i| {
                let s = used[i];
                sample_loss_and_param_grad(&s.state, &s.action, &pa, nmpc, bounds, track)
                    .map_err(|e| log::debug!("skipping sample at t={} lap {}: {e}", s.t, s.lap))
                    .ok()
            });
            let mut grad = [0.0; N_PARAMS];
            let mut n = 0usize;
            for (loss, g) in results.iter().flatten() {
                total += loss;
                for k in 0..N_PARAMS {
                    grad[k] += g[k] * scale[k];
                }
                n += 1;
            }
            skipped += chunk.len() - n;
            processed += n;
            if n == 0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g /= n as f64);
            adam_step(&mut q, &grad, &mut state, &step)?;
            let raw: Vec<f64> = q.iter().zip(&scale).map(|(v, s)| v * s).collect();
            p = NmpcParams::from_array(&raw).project(nmpc);
            q = p.to_array().iter().zip(&scale).map(|(v, s)| v / s).collect();
        }
        check_skips(epoch, skipped, used.len(), cfg)?;
        let v = val_loss(&p);
        report.push(EpochRecord {
            epoch,
            phase: "static".into(),
            train_loss: if processed > 0 { total / processed as f64 } else { f64::NAN },
            val_loss: v,
            processed,
            skipped,
        });
        let better = match (v, best.0) {
            (Some(v), Some(b)) => v < b,
            _ => true,
        };
        if better {
            best = (v, p, Some(epoch));
        }
    }
    if cfg.epochs > 0 {
        report.best_epoch = best.2;
    }
    Ok(best.1)
}

/// Loads the dataset and any checkpoint to resume from, trains, and
/// writes the checkpoint plus its report files.
pub fn train_from_files(cfg: &TrainConfig, track: &CurvatureProfile) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(TrainError::Config("checkpoint path is empty".into()));
    }
    let data = Dataset::load(&cfg.dataset)?;
    data.validate(track, 1e-9)?;
    let resume = if cfg.resume && cfg.checkpoint.exists() {
        Some((PolicyWeights::load(&cfg.checkpoint)?, TrainReport::load(&cfg.checkpoint)?))
    } else {
        None
    };
    let outcome = train(cfg, &data, track, resume)?;
    outcome.weights.save(&cfg.checkpoint)?;
    outcome.report.save(&cfg.checkpoint)?;
    Ok(outcome)
}
