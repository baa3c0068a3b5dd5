//! Path-following NMPC and its setpoint-tracking and safety-filter variants.

mod transcription;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nlp::{
    InteriorPoint, KktPoint, ParametricNlp, SolveError, SolveStatus, SolverOptions, WarmStart,
    TOL_ACT,
};
use crate::sensitivity::{build_sensitivity, SensitivityError, SensitivitySystem};
use crate::track::CurvatureFn;
use crate::vehicle::{
    ControlInput, VehicleParams, VehicleState, DELTA, DELTA_RATE, MIN_VX, NU, NX, SIGMA, THROTTLE,
    VX, VY, YAW_RATE,
};

pub use transcription::NmpcProblem;
use transcription::{CONTROL_BOUND_ROWS, STATE_BOUND_ROWS};

/// Number of learnable cost parameters.
pub const N_PARAMS: usize = 6;
pub const PARAM_NAMES: [&str; N_PARAMS] = ["Wd", "dbar", "Wv", "vxbar", "Wddelta", "Wtr"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Learned weights and offsets.
    Dynamic,
    /// Fixed unit weights tracking `(d̄, v̄x)`.
    Track,
    /// Closest safe action to a proposed one.
    SafetyFilter,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmpcError {
    #[error("initial state outside the admissible region: {0}")]
    InfeasibleState(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("NMPC did not converge ({status:?}, residual {residual:.3e})")]
    NotConverged {
        status: SolveStatus,
        residual: f64,
        best: Box<NmpcSolution>,
    },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("sensitivity: {0}")]
    Sensitivity(#[from] SensitivityError),
}

/// Cost parameters `[W_d, d̄, W_v, v̄x, W_δ̇, W_tr]` in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmpcParams {
    pub w_d: f64,
    pub d_bar: f64,
    pub w_v: f64,
    pub vx_bar: f64,
    pub w_ddelta: f64,
    pub w_tr: f64,
}

impl NmpcParams {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [self.w_d, self.d_bar, self.w_v, self.vx_bar, self.w_ddelta, self.w_tr]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            w_d: a[0],
            d_bar: a[1],
            w_v: a[2],
            vx_bar: a[3],
            w_ddelta: a[4],
            w_tr: a[5],
        }
    }

    pub fn validate(&self, cfg: &NmpcConfig) -> Result<(), NmpcError> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(NmpcError::InvalidParams(format!("non-finite entry in {a:?}")));
        }
        for i in [0, 2, 4, 5] {
            if a[i] < 0.0 {
                return Err(NmpcError::InvalidParams(format!(
                    "{} = {} is negative",
                    PARAM_NAMES[i], a[i]
                )));
            }
        }
        let (dlo, dhi) = cfg.d_bar_bounds();
        let (vlo, vhi) = cfg.vx_bar_bounds();
        if self.d_bar < dlo - 1e-12 || self.d_bar > dhi + 1e-12 {
            return Err(NmpcError::InvalidParams(format!("dbar = {} outside [{dlo}, {dhi}]", self.d_bar)));
        }
        if self.vx_bar < vlo - 1e-12 || self.vx_bar > vhi + 1e-12 {
            return Err(NmpcError::InvalidParams(format!("vxbar = {} outside [{vlo}, {vhi}]", self.vx_bar)));
        }
        Ok(())
    }

    /// Nearest valid parameter vector.
    pub fn project(&self, cfg: &NmpcConfig) -> Self {
        let (dlo, dhi) = cfg.d_bar_bounds();
        let (vlo, vhi) = cfg.vx_bar_bounds();
        Self {
            w_d: self.w_d.max(0.0),
            d_bar: self.d_bar.clamp(dlo, dhi),
            w_v: self.w_v.max(0.0),
            vx_bar: self.vx_bar.clamp(vlo, vhi),
            w_ddelta: self.w_ddelta.max(0.0),
            w_tr: self.w_tr.max(0.0),
        }
    }
}

fn default_sf_weight() -> f64 {
    1e2
}

fn default_sf_lane_margin() -> f64 {
    0.05
}

fn default_sf_rate_margin() -> f64 {
    0.1
}

/// Horizon, regularization, scaling and bounds of the controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub gamma: f64,
    /// Weight of the proposal term of the safety filter. A safe proposal
    /// is moved by roughly `gamma / sf_weight`.
    #[serde(default = "default_sf_weight")]
    pub sf_weight: f64,
    /// Lane backoff of the safety filter, absorbing plant/model mismatch
    /// when its plan runs along the lane edge.
    #[serde(default = "default_sf_lane_margin")]
    pub sf_lane_margin: f64,
    /// Fraction of the steering-rate limit the safety filter keeps in
    /// reserve after the first knot.
    #[serde(default = "default_sf_rate_margin")]
    pub sf_rate_margin: f64,
    pub vehicle: VehicleParams,
    pub lane_width: f64,
    /// Distance kept between `d̄` and the lane edge.
    pub offset_margin: f64,
    /// Scale of the heading error.
    pub theta_scale: f64,
    pub vy_scale: f64,
    pub yaw_rate_scale: f64,
    pub sigma_scale: f64,
    /// Tolerances when accepting an initial state slightly out of bounds.
    pub lane_tolerance: f64,
    pub speed_tolerance: f64,
    pub solver: SolverOptions,
    /// Initial barrier parameter for warm-started solves.
    pub warm_barrier: f64,
}

impl NmpcConfig {
    pub fn new(vehicle: VehicleParams, lane_width: f64) -> Self {
        Self {
            horizon: 15,
            dt: 0.1,
            gamma: 1e-3,
            sf_weight: default_sf_weight(),
            sf_lane_margin: default_sf_lane_margin(),
            sf_rate_margin: default_sf_rate_margin(),
            vehicle,
            lane_width,
            offset_margin: 0.25,
            theta_scale: 0.2,
            vy_scale: 2.0,
            yaw_rate_scale: 0.5,
            sigma_scale: 50.0,
            lane_tolerance: 0.05,
            speed_tolerance: 0.3,
            solver: SolverOptions::default(),
            warm_barrier: 1e-3,
        }
    }

    pub fn half_lane(&self) -> f64 {
        0.5 * self.lane_width
    }

    pub fn d_bar_bounds(&self) -> (f64, f64) {
        let b = self.half_lane() - self.offset_margin;
        (-b, b)
    }

    pub fn vx_bar_bounds(&self) -> (f64, f64) {
        (self.vehicle.vmin, self.vehicle.vmax)
    }

    /// Affine scaling `phys = center + half * z` for `[x, u]`; the `σ`
    /// center is replaced by the initial state's `σ` per instance.
    pub fn scaling(&self) -> ([f64; NX + NU], [f64; NX + NU]) {
        let v = &self.vehicle;
        let mut center = [0.0; NX + NU];
        let mut half = [1.0; NX + NU];
        center[VX] = 0.5 * (v.vmin + v.vmax);
        half[VX] = 0.5 * (v.vmax - v.vmin);
        half[VY] = self.vy_scale;
        half[YAW_RATE] = self.yaw_rate_scale;
        half[SIGMA] = self.sigma_scale;
        half[crate::vehicle::D] = self.half_lane();
        half[crate::vehicle::THETA] = self.theta_scale;
        half[DELTA] = v.delta_max;
        half[NX + DELTA_RATE] = v.delta_rate_max;
        center[NX + THROTTLE] = 0.5;
        half[NX + THROTTLE] = 0.5;
        (center, half)
    }

    pub fn validate(&self) -> Result<(), NmpcError> {
        let bad = |m: &str| Err(NmpcError::InvalidParams(m.to_string()));
        if self.horizon == 0 || !(self.dt > 0.0) {
            return bad("horizon and dt must be positive");
        }
        if !(self.gamma > 0.0) || !(self.sf_weight > 0.0) {
            return bad("gamma and sf_weight must be positive");
        }
        if !(self.lane_width > 2.0 * self.offset_margin) {
            return bad("lane narrower than the offset margins");
        }
        if !(0.0..self.half_lane()).contains(&self.sf_lane_margin) {
            return bad("safety-filter lane margin must lie in [0, w/2)");
        }
        if !(0.0..1.0).contains(&self.sf_rate_margin) {
            return bad("safety-filter rate margin must lie in [0, 1)");
        }
        let (_, half) = self.scaling();
        if half.iter().any(|h| !(*h > 0.0)) {
            return bad("scaling ranges must have positive width");
        }
        self.vehicle
            .validate()
            .map_err(|e| NmpcError::InvalidParams(e.to_string()))
    }

    pub(crate) fn check_state(&self, s: &VehicleState) -> Result<(), NmpcError> {
        let v = &self.vehicle;
        let a = s.to_array();
        if a.iter().any(|x| !x.is_finite()) {
            return Err(NmpcError::InfeasibleState(format!("non-finite state {s}")));
        }
        if s.d.abs() > self.half_lane() + self.lane_tolerance {
            return Err(NmpcError::InfeasibleState(format!(
                "d = {:.3} outside lane ±{:.3}",
                s.d,
                self.half_lane()
            )));
        }
        if s.vx < v.vmin - self.speed_tolerance || s.vx > v.vmax + self.speed_tolerance || s.vx <= MIN_VX {
            return Err(NmpcError::InfeasibleState(format!(
                "vx = {:.3} outside [{}, {}]",
                s.vx, v.vmin, v.vmax
            )));
        }
        if s.delta.abs() > v.delta_max * (1.0 + 1e-9) {
            return Err(NmpcError::InfeasibleState(format!("steering {:.3} beyond limit", s.delta)));
        }
        Ok(())
    }

    pub fn solver(&self) -> InteriorPoint {
        InteriorPoint::new(self.solver.clone())
    }
}

/// Converged NMPC solve.
#[derive(Clone, Debug, PartialEq)]
pub struct NmpcSolution {
    pub action: ControlInput,
    pub kkt: KktPoint,
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    /// Parameter vector the problem was solved with.
    pub params: Vec<f64>,
    pub variant: Variant,
    /// Wall time of the solve in seconds.
    pub solve_time: f64,
}

pub fn transcribe<'a, K: CurvatureFn + Sync>(
    s_t: &VehicleState,
    cfg: &'a NmpcConfig,
    kappa: &'a K,
) -> Result<NmpcProblem<'a, K>, NmpcError> {
    NmpcProblem::new(s_t, cfg, kappa, Variant::Dynamic)
}

/// Setpoint tracker; the parameter vector is `[d̄, v̄x]`.
pub fn transcribe_track_variant<'a, K: CurvatureFn + Sync>(
    s_t: &VehicleState,
    cfg: &'a NmpcConfig,
    kappa: &'a K,
) -> Result<NmpcProblem<'a, K>, NmpcError> {
    NmpcProblem::new(s_t, cfg, kappa, Variant::Track)
}

/// Safety filter; the parameter vector is the proposed action `[δ̇, t_r]`.
pub fn transcribe_safety_filter<'a, K: CurvatureFn + Sync>(
    s_t: &VehicleState,
    cfg: &'a NmpcConfig,
    kappa: &'a K,
) -> Result<NmpcProblem<'a, K>, NmpcError> {
    NmpcProblem::new(s_t, cfg, kappa, Variant::SafetyFilter)
}

fn shift<T: Clone>(v: &[T], block: usize, head: usize) -> Vec<T> {
    // drop the first block after `head`, repeat the last block
    let mut out = v[..head].to_vec();
    out.extend_from_slice(&v[head + block..]);
    let tail = v[v.len() - block..].to_vec();
    out.extend(tail);
    out
}

/// Warm start from the previous solution shifted by one knot.
pub fn shifted_warm_start<K: CurvatureFn + Sync>(
    problem: &NmpcProblem<'_, K>,
    prev: &NmpcSolution,
) -> Option<WarmStart> {
    let n = problem.horizon();
    if prev.states.len() != n + 1 || prev.variant != problem.variant() {
        return None;
    }
    let mut states: Vec<[f64; NX]> = prev.states[1..].iter().map(|s| s.to_array()).collect();
    states.push(prev.states[n].to_array());
    states[0] = problem.initial_state().to_array();
    let mut controls: Vec<[f64; NU]> = prev.controls[1..].iter().map(|u| u.to_array()).collect();
    controls.push(prev.controls[n - 1].to_array());
    let z = problem.pack(&states, &controls);

    // λ = [init | defects | terminal]: the new initial condition inherits
    // the multiplier of the old first defect
    let lam = &prev.kkt.lambda;
    let n_def = n * NX;
    let mut lambda = Vec::with_capacity(lam.len());
    lambda.extend_from_slice(&lam[NX..2 * NX]);
    lambda.extend(shift(&lam[NX..NX + n_def], NX, 0));
    lambda.extend_from_slice(&lam[NX + n_def..]);

    let mu = &prev.kkt.mu;
    let n_state = n * STATE_BOUND_ROWS;
    let mut mu_new = shift(&mu[..n_state], STATE_BOUND_ROWS, 0);
    mu_new.extend(shift(&mu[n_state..n_state + n * CONTROL_BOUND_ROWS], CONTROL_BOUND_ROWS, 0));
    Some(WarmStart {
        z,
        lambda: Some(lambda),
        mu: Some(mu_new),
        barrier: Some(problem.cfg.warm_barrier),
    })
}

/// Solve an instance with parameter vector `p`, cold or warm started.
pub fn solve_problem<K: CurvatureFn + Sync>(
    problem: &NmpcProblem<'_, K>,
    p: &[f64],
    warm: Option<&NmpcSolution>,
) -> Result<NmpcSolution, NmpcError> {
    let start = Instant::now();
    let solver = problem.cfg.solver();
    let warm_start = warm
        .and_then(|prev| shifted_warm_start(problem, prev))
        .unwrap_or_else(|| WarmStart::primal(problem.initial_guess()));
    let mut kkt = solver.solve_warm(problem, p, &warm_start)?;
    if !kkt.converged() && warm_start.lambda.is_some() {
        log::debug!("warm-started NMPC failed ({:?}); retrying cold", kkt.status);
        kkt = solver.solve(problem, p, &problem.initial_guess())?;
    }
    let (states, controls) = problem.trajectory(&kkt.z);
    let sol = NmpcSolution {
        action: controls[0],
        states,
        controls,
        params: p.to_vec(),
        variant: problem.variant(),
        solve_time: start.elapsed().as_secs_f64(),
        kkt,
    };
    if sol.kkt.converged() {
        Ok(sol)
    } else {
        Err(NmpcError::NotConverged {
            status: sol.kkt.status,
            residual: sol.kkt.residuals.max(),
            best: Box::new(sol),
        })
    }
}

/// One receding-horizon step of the learned-cost controller.
pub fn solve_step<K: CurvatureFn + Sync>(
    s_t: &VehicleState,
    p: &NmpcParams,
    warm: Option<&NmpcSolution>,
    cfg: &NmpcConfig,
    kappa: &K,
) -> Result<NmpcSolution, NmpcError> {
    p.validate(cfg)?;
    let problem = transcribe(s_t, cfg, kappa)?;
    solve_problem(&problem, &p.to_array(), warm)
}

/// Sensitivity system of a converged solution.
pub fn sensitivity<K: CurvatureFn + Sync>(
    sol: &NmpcSolution,
    problem: &NmpcProblem<'_, K>,
) -> Result<SensitivitySystem, NmpcError> {
    Ok(build_sensitivity(problem, &sol.params, &sol.kkt, TOL_ACT)?)
}

fn action_seed<K: CurvatureFn + Sync>(problem: &NmpcProblem<'_, K>, abar: &[f64; NU]) -> Vec<f64> {
    let mut zbar = vec![0.0; problem.n_z()];
    let o = problem.control_index(0);
    let half = problem.control_half();
    for i in 0..NU {
        zbar[o + i] = abar[i] * half[i];
    }
    zbar
}

/// Gradient over the parameters of `⟨ā, u₀(p)⟩`, with `ā` a cotangent on
/// the physical action.
pub fn action_cotangent<K: CurvatureFn + Sync>(
    sol: &NmpcSolution,
    problem: &NmpcProblem<'_, K>,
    abar: &[f64; NU],
) -> Result<Vec<f64>, NmpcError> {
    if abar.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; problem.n_p()]);
    }
    let sys = sensitivity(sol, problem)?;
    Ok(sys.adjoint(&action_seed(problem, abar))?)
}

/// `du₀/dp` as a `2 × n_p` row-major matrix, from forward solves.
pub fn action_jacobian<K: CurvatureFn + Sync>(
    sol: &NmpcSolution,
    problem: &NmpcProblem<'_, K>,
) -> Result<Vec<[f64; NU]>, NmpcError> {
    let sys = sensitivity(sol, problem)?;
    let o = problem.control_index(0);
    let half = problem.control_half();
    (0..problem.n_p())
        .map(|k| {
            let mut e = vec![0.0; problem.n_p()];
            e[k] = 1.0;
            let dz = sys.forward_jacobian(&e)?;
            Ok([dz[o] * half[0], dz[o + 1] * half[1]])
        })
        .collect()
}

/// Per-step CSV log of NMPC solutions.
pub struct SolutionLogger<W: Write> {
    out: W,
}

impl<W: Write> SolutionLogger<W> {
    pub fn new(mut out: W, n_params: usize) -> std::io::Result<Self> {
        write!(out, "t,vx,vy,psidot,sigma,d,theta,delta,ddelta,tr")?;
        for i in 0..n_params {
            write!(out, ",p{i}")?;
        }
        writeln!(out, ",stationarity,feasibility,complementarity,iterations,solve_time")?;
        Ok(Self { out })
    }

    pub fn log(&mut self, t: f64, state: &VehicleState, sol: &NmpcSolution) -> std::io::Result<()> {
        write!(self.out, "{t:.3}")?;
        for v in state.to_array() {
            write!(self.out, ",{v}")?;
        }
        write!(self.out, ",{},{}", sol.action.delta_rate, sol.action.throttle)?;
        for v in &sol.params {
            write!(self.out, ",{v}")?;
        }
        let r = &sol.kkt.residuals;
        writeln!(
            self.out,
            ",{:e},{:e},{:e},{},{:.6}",
            r.stationarity, r.feasibility, r.complementarity, sol.kkt.iterations, sol.solve_time
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
