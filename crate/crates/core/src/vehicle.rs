//! Dynamic single-track vehicle in road-aligned (Frenet) coordinates.
//!
//! State `x = [vx, vy, psi_dot, sigma, d, theta, delta]`, control
//! `u = [delta_rate, throttle]`. Tires are linear in slip angle, the drive
//! force is `throttle * max_drive_force` minus rolling and aerodynamic drag,
//! and `delta` is the steering-wheel angle (road wheel angle is
//! `delta / steering_ratio`).
//!
//! Everything is generic over [`Real`], so the same code yields values,
//! exact Jacobians (`Dual<f64>`) and exact Hessians (`Dual<Dual<f64>>`).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{seed2, Dual, Real};
use crate::track::CurvatureFn;

pub const NX: usize = 7;
pub const NU: usize = 2;

pub const VX: usize = 0;
pub const VY: usize = 1;
pub const YAW_RATE: usize = 2;
pub const SIGMA: usize = 3;
pub const D: usize = 4;
pub const THETA: usize = 5;
pub const DELTA: usize = 6;

pub const DELTA_RATE: usize = 0;
pub const THROTTLE: usize = 1;

/// Minimum longitudinal speed accepted by the model.
pub const MIN_VX: f64 = 0.1;
/// Minimum value of `1 - d * kappa` accepted by the Frenet projection.
pub const MIN_PROJECTION: f64 = 0.05;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("longitudinal speed {vx} below {MIN_VX} m/s")]
    LowSpeed { vx: f64 },
    #[error("Frenet projection singular: 1 - d*kappa = {value}")]
    Projection { value: f64 },
    #[error("time step must be positive (got {0})")]
    BadStep(f64),
}

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing key `{0}`")]
    Missing(&'static str),
    #[error("`{key}` must be strictly positive (got {value})")]
    NotPositive { key: &'static str, value: f64 },
    #[error("vmin ({vmin}) must be below vmax ({vmax})")]
    SpeedRange { vmin: f64, vmax: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub vx: f64,
    pub vy: f64,
    pub psi_dot: f64,
    pub sigma: f64,
    pub d: f64,
    pub theta: f64,
    pub delta: f64,
}

impl VehicleState {
    pub fn to_array(&self) -> [f64; NX] {
        [
            self.vx,
            self.vy,
            self.psi_dot,
            self.sigma,
            self.d,
            self.theta,
            self.delta,
        ]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            vx: a[VX],
            vy: a[VY],
            psi_dot: a[YAW_RATE],
            sigma: a[SIGMA],
            d: a[D],
            theta: a[THETA],
            delta: a[DELTA],
        }
    }

    /// Straight-ahead driving on the centerline.
    pub fn aligned(sigma: f64, vx: f64) -> Self {
        Self {
            vx,
            sigma,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub delta_rate: f64,
    pub throttle: f64,
}

impl ControlInput {
    pub fn new(delta_rate: f64, throttle: f64) -> Self {
        Self {
            delta_rate,
            throttle,
        }
    }

    pub fn to_array(&self) -> [f64; NU] {
        [self.delta_rate, self.throttle]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self::new(a[DELTA_RATE], a[THROTTLE])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub cf: f64,
    pub cr: f64,
    pub steering_ratio: f64,
    pub max_drive_force: f64,
    /// Rolling resistance coefficient (fraction of weight).
    pub rolling_coeff: f64,
    /// Aerodynamic drag `F = c * vx^2`, N·s²/m².
    pub aero_coeff: f64,
    pub delta_max: f64,
    pub delta_rate_max: f64,
    pub vmin: f64,
    pub vmax: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl VehicleParams {
    /// Compact car driven at 60–80 km/h.
    pub fn nominal() -> Self {
        Self {
            mass: 1200.0,
            yaw_inertia: 1500.0,
            lf: 1.2,
            lr: 1.4,
            cf: 70_000.0,
            cr: 70_000.0,
            steering_ratio: 15.0,
            max_drive_force: 4000.0,
            rolling_coeff: 0.02,
            aero_coeff: 0.5,
            delta_max: 2.0 * std::f64::consts::PI,
            delta_rate_max: 4.0,
            vmin: 14.0,
            vmax: 23.0,
        }
    }

    /// Plant/model mismatch: inertias scaled by `factor`, tire stiffness and
    /// drive force by `2 - factor` (so 1.1 is a heavier car with less grip).
    pub fn perturbed(&self, factor: f64) -> Self {
        let weaker = 2.0 - factor;
        Self {
            mass: self.mass * factor,
            yaw_inertia: self.yaw_inertia * factor,
            cf: self.cf * weaker,
            cr: self.cr * weaker,
            max_drive_force: self.max_drive_force * weaker,
            ..*self
        }
    }

    fn entries(&self) -> [(&'static str, f64); 14] {
        [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("cf", self.cf),
            ("cr", self.cr),
            ("steering_ratio", self.steering_ratio),
            ("max_drive_force", self.max_drive_force),
            ("rolling_coeff", self.rolling_coeff),
            ("aero_coeff", self.aero_coeff),
            ("delta_max", self.delta_max),
            ("delta_rate_max", self.delta_rate_max),
            ("vmin", self.vmin),
            ("vmax", self.vmax),
        ]
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        for (key, value) in self.entries() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ParamsError::NotPositive { key, value });
            }
        }
        if self.vmin >= self.vmax {
            return Err(ParamsError::SpeedRange {
                vmin: self.vmin,
                vmax: self.vmax,
            });
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parse the `key=value` format. Every key is mandatory.
    pub fn from_kv_str(text: &str) -> Result<Self, ParamsError> {
        let mut map = std::collections::HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ParamsError::Parse {
                line: n + 1,
                msg: "expected key=value".into(),
            })?;
            let v: f64 = v.trim().parse().map_err(|e| ParamsError::Parse {
                line: n + 1,
                msg: format!("{e}"),
            })?;
            map.insert(k.trim().to_string(), v);
        }
        let get = |key: &'static str| map.get(key).copied().ok_or(ParamsError::Missing(key));
        let p = Self {
            mass: get("mass")?,
            yaw_inertia: get("yaw_inertia")?,
            lf: get("lf")?,
            lr: get("lr")?,
            cf: get("cf")?,
            cr: get("cr")?,
            steering_ratio: get("steering_ratio")?,
            max_drive_force: get("max_drive_force")?,
            rolling_coeff: get("rolling_coeff")?,
            aero_coeff: get("aero_coeff")?,
            delta_max: get("delta_max")?,
            delta_rate_max: get("delta_rate_max")?,
            vmin: get("vmin")?,
            vmax: get("vmax")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParamsError> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for VehicleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vx={:.3} vy={:.3} r={:.4} sigma={:.2} d={:.3} theta={:.4} delta={:.4}",
            self.vx, self.vy, self.psi_dot, self.sigma, self.d, self.theta, self.delta
        )
    }
}

/// Tire and drive forces in the body frame.
struct Forces<T> {
    fx: T,
    fyf: T,
    fyr: T,
    wheel_angle: T,
}

fn forces<T: Real>(x: &[T; NX], u: &[T; NU], p: &VehicleParams) -> Forces<T> {
    let vx = x[VX];
    let wheel_angle = x[DELTA] / p.steering_ratio;
    let alpha_f = wheel_angle - ((x[VY] + x[YAW_RATE] * p.lf) / vx).atan();
    let alpha_r = -((x[VY] - x[YAW_RATE] * p.lr) / vx).atan();
    let drag = vx * vx * p.aero_coeff + p.rolling_coeff * p.mass * GRAVITY;
    Forces {
        fx: u[THROTTLE] * p.max_drive_force - drag,
        fyf: alpha_f * p.cf,
        fyr: alpha_r * p.cr,
        wheel_angle,
    }
}

/// Time derivative of the state.
pub fn continuous_dynamics<T: Real, K: CurvatureFn>(
    x: &[T; NX],
    u: &[T; NU],
    kappa_fn: &K,
    p: &VehicleParams,
) -> Result<[T; NX], DynamicsError> {
    let vx = x[VX];
    if vx.value() <= MIN_VX {
        return Err(DynamicsError::LowSpeed { vx: vx.value() });
    }
    let kappa = kappa_fn.kappa(x[SIGMA]);
    let proj = -(x[D] * kappa) + 1.0;
    if proj.value() <= MIN_PROJECTION {
        return Err(DynamicsError::Projection { value: proj.value() });
    }
    let f = forces(x, u, p);
    let (sd, cd) = (f.wheel_angle.sin(), f.wheel_angle.cos());
    let (vy, r, th) = (x[VY], x[YAW_RATE], x[THETA]);
    let (sth, cth) = (th.sin(), th.cos());

    let vx_dot = (f.fx - f.fyf * sd) / p.mass + vy * r;
    let vy_dot = (f.fyr + f.fyf * cd) / p.mass - vx * r;
    let r_dot = (f.fyf * cd * p.lf - f.fyr * p.lr) / p.yaw_inertia;
    let sigma_dot = (vx * cth - vy * sth) / proj;
    let d_dot = vx * sth + vy * cth;
    let theta_dot = r - kappa * sigma_dot;
    Ok([
        vx_dot, vy_dot, r_dot, sigma_dot, d_dot, theta_dot, u[DELTA_RATE],
    ])
}

/// Body-frame accelerations `(ax, ay)` from the force balance.
pub fn body_accelerations<K: CurvatureFn>(
    x: &VehicleState,
    u: &ControlInput,
    kappa_fn: &K,
    p: &VehicleParams,
) -> Result<(f64, f64), DynamicsError> {
    let xa = x.to_array();
    let xd = continuous_dynamics(&xa, &u.to_array(), kappa_fn, p)?;
    Ok((
        xd[VX] - x.psi_dot * x.vy,
        xd[VY] + x.psi_dot * x.vx,
    ))
}

fn axpy<T: Real>(x: &[T; NX], k: &[T; NX], h: f64) -> [T; NX] {
    std::array::from_fn(|i| x[i] + k[i] * h)
}

/// One classical Runge-Kutta step for an arbitrary vector field.
pub fn rk4<T: Real, F>(x: &[T; NX], dt: f64, mut field: F) -> Result<[T; NX], DynamicsError>
where
    F: FnMut(&[T; NX]) -> Result<[T; NX], DynamicsError>,
{
    if !(dt > 0.0) {
        return Err(DynamicsError::BadStep(dt));
    }
    let k1 = field(x)?;
    let k2 = field(&axpy(x, &k1, 0.5 * dt))?;
    let k3 = field(&axpy(x, &k2, 0.5 * dt))?;
    let k4 = field(&axpy(x, &k3, dt))?;
    Ok(std::array::from_fn(|i| {
        x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0)
    }))
}

/// Discrete dynamics: one RK4 step with zero-order-hold controls. Curvature
/// is looked up at every stage's own `sigma`.
pub fn rk4_step<T: Real, K: CurvatureFn>(
    x: &[T; NX],
    u: &[T; NU],
    dt: f64,
    kappa_fn: &K,
    p: &VehicleParams,
) -> Result<[T; NX], DynamicsError> {
    rk4(x, dt, |xs| continuous_dynamics(xs, u, kappa_fn, p))
}

/// Convenience wrapper on the typed state.
pub fn step_state<K: CurvatureFn>(
    x: &VehicleState,
    u: &ControlInput,
    dt: f64,
    kappa_fn: &K,
    p: &VehicleParams,
) -> Result<VehicleState, DynamicsError> {
    let next = rk4_step(&x.to_array(), &u.to_array(), dt, kappa_fn, p)?;
    Ok(VehicleState::from_array(&next))
}

/// Jacobians of [`rk4_step`]: `(df/dx, df/du)`, row-major `[row][col]`.
pub type StepJacobians = ([[f64; NX]; NX], [[f64; NU]; NX]);

pub fn discrete_jacobians<K: CurvatureFn>(
    x: &[f64; NX],
    u: &[f64; NU],
    dt: f64,
    kappa_fn: &K,
    p: &VehicleParams,
) -> Result<StepJacobians, DynamicsError> {
    let mut jx = [[0.0; NX]; NX];
    let mut ju = [[0.0; NU]; NX];
    for dir in 0..NX + NU {
        let xd: [Dual<f64>; NX] =
            std::array::from_fn(|i| Dual::new(x[i], if i == dir { 1.0 } else { 0.0 }));
        let ud: [Dual<f64>; NU] =
            std::array::from_fn(|i| Dual::new(u[i], if NX + i == dir { 1.0 } else { 0.0 }));
        let out = rk4_step(&xd, &ud, dt, kappa_fn, p)?;
        for row in 0..NX {
            if dir < NX {
                jx[row][dir] = out[row].eps;
            } else {
                ju[row][dir - NX] = out[row].eps;
            }
        }
    }
    Ok((jx, ju))
}

/// Hessian of `w · rk4_step(x, u)` with respect to `(x, u)` stacked, as a
/// 9×9 row-major array.
pub fn discrete_hessian_contraction<K: CurvatureFn>(
    x: &[f64; NX],
    u: &[f64; NU],
    dt: f64,
    kappa_fn: &K,
    p: &VehicleParams,
    w: &[f64; NX],
) -> Result<[[f64; NX + NU]; NX + NU], DynamicsError> {
    const NZ: usize = NX + NU;
    let mut hess = [[0.0; NZ]; NZ];
    if w.iter().all(|&v| v == 0.0) {
        return Ok(hess);
    }
    let z: Vec<f64> = x.iter().chain(u).copied().collect();
    for i in 0..NZ {
        for j in i..NZ {
            let zd: Vec<_> = (0..NZ).map(|k| seed2(z[k], k == i, k == j)).collect();
            let xd: [_; NX] = std::array::from_fn(|k| zd[k]);
            let ud: [_; NU] = std::array::from_fn(|k| zd[NX + k]);
            let out = rk4_step(&xd, &ud, dt, kappa_fn, p)?;
            let v: f64 = out.iter().zip(w).map(|(o, wk)| o.eps.eps * wk).sum();
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    Ok(hess)
}
