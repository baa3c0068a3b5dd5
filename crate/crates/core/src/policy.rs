//! Feature network that maps a state/curvature summary to NMPC cost
//! parameters (or, for the filtered baseline, directly to an action).
//!
//! Hidden layers use `tanh`. Each output row goes through a head: weight
//! heads are ReLU so the learned cost stays positive semi-definite, offset
//! heads squash into an interval with `tanh`.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nmpc::{NmpcConfig, NmpcParams, N_PARAMS};
use crate::track::CurvatureProfile;
use crate::vehicle::VehicleState;

pub const N_FEATURES: usize = 10;
/// Curvature look-ahead distances, metres.
pub const PREVIEW_OFFSETS: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["vx", "d", "theta", "k0", "k5", "k10", "k15", "k20", "k25", "k30"];
pub const HIDDEN_SIZES: [usize; 2] = [100, 50];
const CHECKPOINT_VERSION: &str = "dmpc-policy v1";
const WEIGHT_HEAD_BIAS: f64 = 0.5;
/// Offset heads never reach their endpoints.
const OFFSET_MARGIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("expected {expected} inputs, got {got}")]
    InputSize { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Affine normalization `(raw - center) / scale` of each feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub center: [f64; N_FEATURES],
    pub scale: [f64; N_FEATURES],
}

impl FeatureNorm {
    /// Speed around the middle of the admissible band, offsets relative to
    /// the half lane, curvature relative to a 100 m radius.
    pub fn for_config(cfg: &NmpcConfig) -> Self {
        let (vlo, vhi) = cfg.vx_bar_bounds();
        let mut center = [0.0; N_FEATURES];
        let mut scale = [0.01; N_FEATURES];
        center[0] = 0.5 * (vlo + vhi);
        scale[0] = 0.5 * (vhi - vlo);
        scale[1] = cfg.half_lane();
        scale[2] = 0.1;
        Self { center, scale }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    pub raw: [f64; N_FEATURES],
    pub normalized: [f64; N_FEATURES],
}

impl FeatureVector {
    pub fn from_raw(raw: [f64; N_FEATURES], norm: &FeatureNorm) -> Self {
        let normalized = std::array::from_fn(|i| (raw[i] - norm.center[i]) / norm.scale[i]);
        Self { raw, normalized }
    }

    pub fn in_distribution(&self) -> bool {
        self.normalized.iter().all(|v| v.abs() <= 3.0)
    }
}

pub fn extract_features(s: &VehicleState, track: &CurvatureProfile, norm: &FeatureNorm) -> FeatureVector {
    let mut raw = [0.0; N_FEATURES];
    raw[0] = s.vx;
    raw[1] = s.d;
    raw[2] = s.theta;
    raw[3..].copy_from_slice(&track.curvature_preview(s.sigma, &PREVIEW_OFFSETS));
    let f = FeatureVector::from_raw(raw, norm);
    if !f.in_distribution() {
        log::debug!("feature outside [-3, 3] at sigma {:.1}: {:?}", s.sigma, f.normalized);
    }
    f
}

/// Output nonlinearity of one network row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Head {
    /// `max(a, 0)`.
    Weight,
    /// `(lo + hi) / 2 + (hi - lo) / 2 * tanh(a)`.
    Offset { lo: f64, hi: f64 },
}

impl Head {
    pub fn apply(&self, a: f64) -> f64 {
        match *self {
            Head::Weight => a.max(0.0),
            Head::Offset { lo, hi } => {
                let t = a.tanh().clamp(-1.0 + OFFSET_MARGIN, 1.0 - OFFSET_MARGIN);
                0.5 * (lo + hi) + 0.5 * (hi - lo) * t
            }
        }
    }

    pub fn derivative(&self, a: f64) -> f64 {
        match *self {
            Head::Weight => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Head::Offset { lo, hi } => {
                let t = a.tanh();
                0.5 * (hi - lo) * (1.0 - t * t)
            }
        }
    }

    /// Pre-activation that maps to `y`; offsets at a bound are pulled
    /// just inside it.
    pub fn inverse(&self, y: f64) -> f64 {
        match *self {
            Head::Weight => y.max(0.0),
            Head::Offset { lo, hi } => {
                let t = (2.0 * y - lo - hi) / (hi - lo);
                t.clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh()
            }
        }
    }

    fn bias_init(&self) -> f64 {
        match self {
            Head::Weight => WEIGHT_HEAD_BIAS,
            Head::Offset { .. } => 0.0,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Weight => write!(f, "weight"),
            Head::Offset { lo, hi } => write!(f, "offset({lo},{hi})"),
        }
    }
}

fn parse_head(text: &str) -> Result<Head, PolicyError> {
    if text == "weight" {
        return Ok(Head::Weight);
    }
    let inner = text
        .strip_prefix("offset(")
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| PolicyError::Format(format!("unknown head {text:?}")))?;
    let (lo, hi) = inner
        .split_once(',')
        .ok_or_else(|| PolicyError::Format(format!("bad head {text:?}")))?;
    let num = |s: &str| s.parse::<f64>().map_err(|e| PolicyError::Format(format!("{s:?}: {e}")));
    Ok(Head::Offset { lo: num(lo)?, hi: num(hi)? })
}

/// Heads for the six cost parameters `[W_d, d̄, W_v, v̄x, W_δ̇, W_tr]`.
pub fn param_heads(cfg: &NmpcConfig) -> Vec<Head> {
    let (dlo, dhi) = cfg.d_bar_bounds();
    let (vlo, vhi) = cfg.vx_bar_bounds();
    vec![
        Head::Weight,
        Head::Offset { lo: dlo, hi: dhi },
        Head::Weight,
        Head::Offset { lo: vlo, hi: vhi },
        Head::Weight,
        Head::Weight,
    ]
}

/// Heads for the raw action `[δ, t_r]` of the filtered baseline.
pub fn action_heads(cfg: &NmpcConfig) -> Vec<Head> {
    let dmax = cfg.vehicle.delta_max;
    vec![Head::Offset { lo: -dmax, hi: dmax }, Head::Offset { lo: 0.0, hi: 1.0 }]
}

/// Heads for the `[d, vx]` setpoints of the tracking baseline.
pub fn setpoint_heads(cfg: &NmpcConfig) -> Vec<Head> {
    let (dlo, dhi) = cfg.d_bar_bounds();
    let (vlo, vhi) = cfg.vx_bar_bounds();
    vec![Head::Offset { lo: dlo, hi: dhi }, Head::Offset { lo: vlo, hi: vhi }]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weights: DMatrix::zeros(n_out, n_in),
            bias: DVector::zeros(n_out),
        }
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Network weights `Θ` plus the fixed feature normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyWeights {
    /// Hidden layers followed by the output layer (one row per head).
    pub layers: Vec<Dense>,
    pub heads: Vec<Head>,
    pub norm: FeatureNorm,
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input followed by every hidden activation.
    activations: Vec<DVector<f64>>,
    pre_output: DVector<f64>,
    output: Vec<f64>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn pre_output(&self) -> &[f64] {
        self.pre_output.as_slice()
    }
}

impl PolicyWeights {
    /// Zero network with the given layer sizes (`[n_in, hidden...]`).
    pub fn zeros(sizes: &[usize], heads: Vec<Head>, norm: FeatureNorm) -> Self {
        assert!(!sizes.is_empty() && !heads.is_empty());
        let mut layers: Vec<Dense> = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        layers.push(Dense::zeros(*sizes.last().unwrap(), heads.len()));
        Self { layers, heads, norm }
    }

    /// The full-size parameter network.
    pub fn for_params(cfg: &NmpcConfig) -> Self {
        let mut sizes = vec![N_FEATURES];
        sizes.extend(HIDDEN_SIZES);
        Self::zeros(&sizes, param_heads(cfg), FeatureNorm::for_config(cfg))
    }

    /// Network with no hidden layer and zero weights whose output is
    /// `values` for every input.
    pub fn constant(values: &[f64], heads: Vec<Head>, norm: FeatureNorm) -> Self {
        assert_eq!(values.len(), heads.len());
        let mut w = Self::zeros(&[N_FEATURES], heads, norm);
        for (i, (&v, h)) in values.iter().zip(&w.heads).enumerate() {
            w.layers[0].bias[i] = h.inverse(v);
        }
        w
    }

    /// Uniform `±1/sqrt(fan_in)` weights from `seed`; weight-head biases
    /// start at 0.5, every other bias at 0.
    pub fn init_weights(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let bound = 1.0 / (layer.weights.ncols() as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            for (i, b) in layer.bias.iter_mut().enumerate() {
                *b = if l == last { self.heads[i].bias_init() } else { 0.0 };
            }
        }
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.heads.len()
    }

    /// Layer sizes `[n_in, hidden..., n_out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.n_inputs()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// Every weight then bias of every layer, weights row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            for r in 0..layer.weights.nrows() {
                out.extend(layer.weights.row(r).iter());
            }
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            for r in 0..layer.weights.nrows() {
                for c in 0..layer.weights.ncols() {
                    layer.weights[(r, c)] = it.next().unwrap();
                }
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardPass, PolicyError> {
        if input.len() != self.n_inputs() {
            return Err(PolicyError::InputSize {
                expected: self.n_inputs(),
                got: input.len(),
            });
        }
        let mut activations = vec![DVector::from_column_slice(input)];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers[..last].iter().enumerate() {
            let a = (&layer.weights * activations.last().unwrap() + &layer.bias).map(f64::tanh);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::NonFinite(format!("hidden layer {l}")));
            }
            activations.push(a);
        }
        let out_layer = &self.layers[last];
        let pre_output = &out_layer.weights * activations.last().unwrap() + &out_layer.bias;
        let output: Vec<f64> = pre_output.iter().zip(&self.heads).map(|(&a, h)| h.apply(a)).collect();
        if output.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite("output heads".into()));
        }
        Ok(ForwardPass {
            activations,
            pre_output,
            output,
        })
    }

    /// Gradient of `⟨grad_out, forward(·)⟩` over all weights, in
    /// [`to_flat`](Self::to_flat) order.
    pub fn backward(&self, pass: &ForwardPass, grad_out: &[f64]) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.n_outputs());
        let grad_pre: Vec<f64> = grad_out
            .iter()
            .zip(self.heads.iter().zip(pass.pre_output.iter()))
            .map(|(&g, (h, &a))| g * h.derivative(a))
            .collect();
        self.backward_pre(pass, &grad_pre)
    }

    /// Like [`backward`](Self::backward) with the cotangent given on the
    /// head pre-activations.
    pub fn backward_pre(&self, pass: &ForwardPass, grad_pre: &[f64]) -> Vec<f64> {
        assert_eq!(grad_pre.len(), self.n_outputs());
        let last = self.layers.len() - 1;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = DVector::from_column_slice(grad_pre);
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let input = &pass.activations[l];
            grads.push(Dense {
                weights: &delta * input.transpose(),
                bias: delta.clone(),
            });
            if l > 0 {
                let back = layer.weights.tr_mul(&delta);
                delta = back.zip_map(input, |g, a| g * (1.0 - a * a));
            }
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.n_params());
        for g in &grads {
            for r in 0..g.weights.nrows() {
                out.extend(g.weights.row(r).iter());
            }
            out.extend(g.bias.iter());
        }
        out
    }

    pub fn features(&self, s: &VehicleState, track: &CurvatureProfile) -> FeatureVector {
        extract_features(s, track, &self.norm)
    }

    /// Cost parameters for a state; only meaningful with [`param_heads`].
    pub fn params(&self, s: &VehicleState, track: &CurvatureProfile) -> Result<NmpcParams, PolicyError> {
        debug_assert_eq!(self.n_outputs(), N_PARAMS);
        let f = self.features(s, track);
        Ok(NmpcParams::from_array(self.forward(&f.normalized)?.output()))
    }

    pub fn signature(&self) -> String {
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        let heads: Vec<String> = self.heads.iter().map(|h| h.to_string()).collect();
        format!(
            "{CHECKPOINT_VERSION} sizes={} hidden=tanh heads={}",
            sizes.join(","),
            heads.join(";")
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = self.signature();
        s.push('\n');
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        s += &format!("norm.center {}\n", join(&mut self.norm.center.iter().copied()));
        s += &format!("norm.scale {}\n", join(&mut self.norm.scale.iter().copied()));
        for (l, layer) in self.layers.iter().enumerate() {
            let mut rows = (0..layer.weights.nrows()).flat_map(|r| layer.weights.row(r).iter().copied().collect::<Vec<_>>());
            s += &format!("layer{l}.weight {}\n", join(&mut rows));
            s += &format!("layer{l}.bias {}\n", join(&mut layer.bias.iter().copied()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| PolicyError::Format("empty file".into()))?;
        let rest = header
            .strip_prefix(CHECKPOINT_VERSION)
            .ok_or_else(|| PolicyError::Format(format!("unsupported header {header:?}")))?;
        let mut sizes = None;
        let mut heads = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("sizes", v)) => {
                    sizes = Some(
                        v.split(',')
                            .map(|x| x.parse::<usize>())
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|e| PolicyError::Format(format!("sizes: {e}")))?,
                    )
                }
                Some(("heads", v)) => heads = Some(v.split(';').map(parse_head).collect::<Result<Vec<_>, _>>()?),
                Some(("hidden", "tanh")) => {}
                _ => return Err(PolicyError::Format(format!("unknown header field {field:?}"))),
            }
        }
        let sizes = sizes.ok_or_else(|| PolicyError::Format("missing sizes".into()))?;
        let heads = heads.ok_or_else(|| PolicyError::Format("missing heads".into()))?;
        if sizes.len() < 2 || *sizes.last().unwrap() != heads.len() {
            return Err(PolicyError::Format("sizes do not match heads".into()));
        }
        let mut w = Self::zeros(&sizes[..sizes.len() - 1], heads, FeatureNorm {
            center: [0.0; N_FEATURES],
            scale: [1.0; N_FEATURES],
        });
        let mut tensor = |name: &str, len: usize| -> Result<Vec<f64>, PolicyError> {
            let line = lines.next().ok_or_else(|| PolicyError::Format(format!("missing {name}")))?;
            let (tag, values) = line.split_once(' ').unwrap_or((line, ""));
            if tag != name {
                return Err(PolicyError::Format(format!("expected {name}, found {tag}")));
            }
            let v = values
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PolicyError::Format(format!("{name}: {e}")))?;
            if v.len() != len {
                return Err(PolicyError::Format(format!("{name}: expected {len} values, got {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PolicyError::NonFinite(name.to_string()));
            }
            Ok(v)
        };
        w.norm.center.copy_from_slice(&tensor("norm.center", N_FEATURES)?);
        w.norm.scale.copy_from_slice(&tensor("norm.scale", N_FEATURES)?);
        for l in 0..w.layers.len() {
            let (rows, cols) = w.layers[l].weights.shape();
            let v = tensor(&format!("layer{l}.weight"), rows * cols)?;
            w.layers[l].weights = DMatrix::from_row_slice(rows, cols, &v);
            let b = tensor(&format!("layer{l}.bias"), rows)?;
            w.layers[l].bias = DVector::from_vec(b);
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the checkpoint text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::build_paper_track;
    use crate::vehicle::VehicleParams;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn cfg() -> NmpcConfig {
        NmpcConfig::new(VehicleParams::nominal(), 4.5)
    }

    fn reduced(heads: Vec<Head>, seed: u64) -> PolicyWeights {
        let norm = FeatureNorm::for_config(&cfg());
        let mut w = PolicyWeights::zeros(&[N_FEATURES, 4], heads, norm).init_weights(seed);
        // move the biases away from zero so every branch is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for layer in &mut w.layers {
            for b in layer.bias.iter_mut() {
                *b += rng.gen_range(-0.5..0.5);
            }
        }
        w
    }

    fn input(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..N_FEATURES).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn straight_features_have_zero_curvature() {
        let track = build_paper_track();
        let s = VehicleState::aligned(5.0, 18.0);
        let f = extract_features(&s, &track, &FeatureNorm::for_config(&cfg()));
        assert!(f.raw[3..].iter().all(|&k| k == 0.0));
        assert_eq!(f.raw[0], 18.0);
        assert_eq!(f.normalized[1], 0.0);
    }

    #[test]
    fn preview_sees_the_curve_before_it_starts() {
        let track = build_paper_track();
        let curve = track.curves()[0];
        let s = VehicleState::aligned(curve.start - 25.0, 18.0);
        let f = extract_features(&s, &track, &FeatureNorm::for_config(&cfg()));
        assert_eq!(&f.raw[3..8], &[0.0; 5]);
        assert!(f.raw[9] > 0.0);
        assert!((f.raw[9] - track.curvature(curve.start + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn features_wrap_with_the_track() {
        let track = build_paper_track();
        let norm = FeatureNorm::for_config(&cfg());
        let mut s = VehicleState::aligned(700.0, 18.0);
        let a = extract_features(&s, &track, &norm);
        s.sigma += track.total_length();
        let b = extract_features(&s, &track, &norm);
        for i in 0..N_FEATURES {
            assert!((a.raw[i] - b.raw[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_outputs_interval_midpoints() {
        let c = cfg();
        let w = PolicyWeights::for_params(&c);
        let out = w.forward(&[0.3; N_FEATURES]).unwrap().output().to_vec();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[4], 0.0);
        assert_eq!(out[5], 0.0);
        assert!(out[1].abs() < 1e-15);
        assert!((out[3] - 18.5).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_head_is_clamped() {
        let mut w = PolicyWeights::for_params(&cfg());
        w.layers[2].bias[0] = -5.0;
        let pass = w.forward(&[0.0; N_FEATURES]).unwrap();
        assert_eq!(pass.output()[0], 0.0);
        let g = w.backward(&pass, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_network_reproduces_its_values() {
        let c = cfg();
        let p = [1.5, -0.7, 0.0, 22.0, 0.5, 0.02];
        let w = PolicyWeights::constant(&p, param_heads(&c), FeatureNorm::for_config(&c));
        for seed in 0..5 {
            let out = w.forward(&input(seed)).unwrap().output().to_vec();
            assert!(out.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-12), "{out:?}");
        }
        let back = PolicyWeights::from_text(&w.to_text()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let w = PolicyWeights::for_params(&cfg()).init_weights(3);
        let pass = w.forward(&input(1)).unwrap();
        assert!(w.backward(&pass, &[0.0; 6]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let heads = vec![Head::Weight, Head::Offset { lo: -2.0, hi: 1.0 }];
        for seed in 0..5 {
            let w = reduced(heads.clone(), seed);
            let x = input(seed + 10);
            let gbar = [0.7, -1.3];
            let pass = w.forward(&x).unwrap();
            let grad = w.backward(&pass, &gbar);
            let flat = w.to_flat();
            let f = |theta: &[f64]| {
                let mut v = w.clone();
                v.set_flat(theta);
                let out = v.forward(&x).unwrap();
                gbar[0] * out.output()[0] + gbar[1] * out.output()[1]
            };
            for i in 0..flat.len() {
                let h = 1e-6;
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let err = (grad[i] - fd).abs() / fd.abs().max(1.0);
                assert!(err < 1e-6, "seed {seed} param {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let c = cfg();
        let a = PolicyWeights::for_params(&c).init_weights(7);
        let b = PolicyWeights::for_params(&c).init_weights(7);
        let d = PolicyWeights::for_params(&c).init_weights(8);
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn initial_weight_outputs_are_positive() {
        let c = cfg();
        let track = build_paper_track();
        let w = PolicyWeights::for_params(&c).init_weights(1);
        for sigma in [0.0, 250.0, 900.0, 1500.0] {
            let p = w.params(&VehicleState::aligned(sigma, 18.5), &track).unwrap();
            assert!(p.w_d > 0.0 && p.w_v > 0.0 && p.w_ddelta > 0.0 && p.w_tr > 0.0, "{p:?}");
            p.validate(&c).unwrap();
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let w = PolicyWeights::for_params(&cfg()).init_weights(5);
        let text = w.to_text();
        assert!(text.starts_with(CHECKPOINT_VERSION));
        let back = PolicyWeights::from_text(&text).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.hash(), w.hash());

        let a = PolicyWeights::zeros(&[N_FEATURES, 4], action_heads(&cfg()), w.norm);
        assert_eq!(PolicyWeights::from_text(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn checkpoint_signature_is_validated() {
        let w = PolicyWeights::for_params(&cfg());
        let text = w.to_text().replacen("sizes=10,100,50,6", "sizes=10,100,6", 1);
        assert!(PolicyWeights::from_text(&text).is_err());
        let text = w.to_text().replacen("dmpc-policy v1", "dmpc-policy v0", 1);
        assert!(PolicyWeights::from_text(&text).is_err());
        let truncated: String = w.to_text().lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(PolicyWeights::from_text(&truncated).is_err());
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let w = PolicyWeights::for_params(&cfg());
        assert!(matches!(w.forward(&[0.0; 3]), Err(PolicyError::InputSize { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn outputs_respect_head_bounds(seed in 0u64..1000, x in proptest::collection::vec(-50.0f64..50.0, N_FEATURES)) {
            let c = cfg();
            let mut w = PolicyWeights::for_params(&c).init_weights(seed);
            // large weights push the heads into saturation
            for v in w.layers[2].weights.iter_mut() {
                *v *= 40.0;
            }
            let p = NmpcParams::from_array(w.forward(&x).unwrap().output());
            prop_assert!(p.validate(&c).is_ok());
            let (dlo, dhi) = c.d_bar_bounds();
            let (vlo, vhi) = c.vx_bar_bounds();
            prop_assert!(p.d_bar > dlo && p.d_bar < dhi);
            prop_assert!(p.vx_bar > vlo && p.vx_bar < vhi);
        }
    }
}
