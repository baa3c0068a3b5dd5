//! Multiple-shooting transcription of the path-following NMPC.
//!
//! Decision vector, stage by stage: `[x_0, u_0, x_1, u_1, ..., x_{N-1},
//! u_{N-1}, x_N]`, every entry scaled to `[-1, 1]` by `phys = c + h * z`.
//! Equalities are the initial condition and the RK4 defects (divided by
//! the state scales); inequalities are box bounds on `d`, `vx`, `δ` at
//! knots `1..=N` and on `δ̇`, `t_r` at knots `0..N`.

use nalgebra::DMatrix;

use super::{NmpcConfig, NmpcError, Variant};
use crate::nlp::{EvalError, ParametricNlp, SparseMatrix};
use crate::track::CurvatureFn;
use crate::vehicle::{
    discrete_hessian_contraction, discrete_jacobians, rk4_step, ControlInput, VehicleState, D,
    DELTA, DELTA_RATE, NU, NX, SIGMA, THETA, THROTTLE, VX,
};

const STAGE: usize = NX + NU;

/// Rows of state bounds per knot: `d`, `vx`, `δ`, two sides each.
pub(crate) const STATE_BOUND_ROWS: usize = 6;
/// Rows of control bounds per knot: `δ̇`, `t_r`, two sides each.
pub(crate) const CONTROL_BOUND_ROWS: usize = 4;
const BOUNDED_STATES: [usize; 3] = [D, VX, DELTA];

/// One NMPC instance: a fixed initial state and variant. The cost
/// parameters are the NLP parameter vector `p`.
#[derive(Clone, Debug)]
pub struct NmpcProblem<'a, K> {
    pub(crate) cfg: &'a NmpcConfig,
    pub(crate) kappa: &'a K,
    pub(crate) x0: [f64; NX],
    pub(crate) variant: Variant,
    center: [f64; STAGE],
    half: [f64; STAGE],
    /// Scaled bound of each entry of `BOUNDED_STATES`.
    limit: [f64; 3],
    /// Scaled control bounds after the first knot.
    tail_limit: [f64; NU],
}

impl<'a, K: CurvatureFn + Sync> NmpcProblem<'a, K> {
    pub(crate) fn new(
        s_t: &VehicleState,
        cfg: &'a NmpcConfig,
        kappa: &'a K,
        variant: Variant,
    ) -> Result<Self, NmpcError> {
        cfg.check_state(s_t)?;
        let (mut center, half) = cfg.scaling();
        center[SIGMA] = s_t.sigma;
        let mut limit = [1.0; 3];
        let mut tail_limit = [1.0; NU];
        if variant == Variant::SafetyFilter {
            limit[0] = 1.0 - cfg.sf_lane_margin / half[D];
            tail_limit[DELTA_RATE] = 1.0 - cfg.sf_rate_margin;
        }
        Ok(Self {
            cfg,
            kappa,
            x0: s_t.to_array(),
            variant,
            center,
            half,
            limit,
            tail_limit,
        })
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn initial_state(&self) -> VehicleState {
        VehicleState::from_array(&self.x0)
    }

    /// Index of `x_k` in `z`.
    pub fn state_index(&self, k: usize) -> usize {
        k * STAGE
    }

    /// Index of `u_k` in `z`.
    pub fn control_index(&self, k: usize) -> usize {
        k * STAGE + NX
    }

    pub fn scale_state(&self, x: &[f64; NX]) -> [f64; NX] {
        std::array::from_fn(|i| (x[i] - self.center[i]) / self.half[i])
    }

    pub fn scale_control(&self, u: &[f64; NU]) -> [f64; NU] {
        std::array::from_fn(|i| (u[i] - self.center[NX + i]) / self.half[NX + i])
    }

    pub fn state(&self, z: &[f64], k: usize) -> [f64; NX] {
        let o = self.state_index(k);
        std::array::from_fn(|i| self.center[i] + self.half[i] * z[o + i])
    }

    pub fn control(&self, z: &[f64], k: usize) -> [f64; NU] {
        let o = self.control_index(k);
        std::array::from_fn(|i| self.center[NX + i] + self.half[NX + i] * z[o + i])
    }

    /// Scale of each control entry (`∂u_phys/∂z`).
    pub fn control_half(&self) -> [f64; NU] {
        [self.half[NX], self.half[NX + 1]]
    }

    pub fn trajectory(&self, z: &[f64]) -> (Vec<VehicleState>, Vec<ControlInput>) {
        let n = self.cfg.horizon;
        let states = (0..=n)
            .map(|k| VehicleState::from_array(&self.state(z, k)))
            .collect();
        let controls = (0..n)
            .map(|k| ControlInput::from_array(&self.control(z, k)))
            .collect();
        (states, controls)
    }

    /// Pack a physical trajectory into a scaled decision vector.
    pub fn pack(&self, states: &[[f64; NX]], controls: &[[f64; NU]]) -> Vec<f64> {
        let n = self.cfg.horizon;
        let mut z = vec![0.0; self.n_z()];
        for k in 0..=n {
            let xs = self.scale_state(&states[k]);
            z[self.state_index(k)..self.state_index(k) + NX].copy_from_slice(&xs);
            if k < n {
                let us = self.scale_control(&controls[k]);
                z[self.control_index(k)..self.control_index(k) + NU].copy_from_slice(&us);
            }
        }
        z
    }

    /// Cold-start guess: follow the centerline at constant speed with the
    /// kinematic steering angle, keeping the initial offset.
    pub fn initial_guess(&self) -> Vec<f64> {
        let cfg = self.cfg;
        let veh = &cfg.vehicle;
        let n = cfg.horizon;
        let vx = self.x0[VX].clamp(veh.vmin, veh.vmax);
        let wheelbase = veh.lf + veh.lr;
        let drag = veh.aero_coeff * vx * vx + veh.rolling_coeff * veh.mass * crate::vehicle::GRAVITY;
        let throttle = (drag / veh.max_drive_force).clamp(0.0, 1.0);
        let mut states = Vec::with_capacity(n + 1);
        states.push(self.x0);
        let mut sigma = self.x0[SIGMA];
        for _ in 1..=n {
            sigma += vx * cfg.dt;
            let kappa = self.kappa.kappa(sigma);
            let delta = (veh.steering_ratio * wheelbase * kappa).clamp(-veh.delta_max, veh.delta_max);
            let d = self.x0[D].clamp(-0.9 * cfg.half_lane(), 0.9 * cfg.half_lane());
            states.push([vx, 0.0, vx * kappa, sigma, d, 0.0, delta]);
        }
        let controls: Vec<[f64; NU]> = (0..n)
            .map(|k| {
                let rate = ((states[k + 1][DELTA] - states[k][DELTA]) / cfg.dt)
                    .clamp(-0.9 * veh.delta_rate_max, 0.9 * veh.delta_rate_max);
                [rate, throttle]
            })
            .collect();
        self.pack(&states, &controls)
    }

    fn n_terminal(&self) -> usize {
        match self.variant {
            Variant::SafetyFilter => 2,
            _ => 0,
        }
    }

    /// `(variable index, weight, target)` for every squared cost term.
    fn quad_terms(&self, p: &[f64]) -> Vec<(usize, f64, f64)> {
        let n = self.cfg.horizon;
        let g = self.cfg.gamma;
        let mut t = Vec::with_capacity(8 * n);
        for k in 0..n {
            let (xi, ui) = (self.state_index(k), self.control_index(k));
            let (d, v, th, de) = (xi + D, xi + VX, xi + THETA, xi + DELTA);
            let (rate, tr) = (ui + DELTA_RATE, ui + THROTTLE);
            match self.variant {
                Variant::Dynamic => {
                    t.push((d, p[0], p[1] / self.half[D]));
                    t.push((v, p[2], (p[3] - self.center[VX]) / self.half[VX]));
                    t.push((rate, p[4], 0.0));
                    t.push((tr, p[5], 0.0));
                    t.extend([(d, g, 0.0), (th, g, 0.0), (de, g, 0.0), (rate, g, 0.0), (tr, g, 0.0)]);
                }
                Variant::Track => {
                    t.push((d, 1.0, p[0] / self.half[D]));
                    t.push((v, 1.0, (p[1] - self.center[VX]) / self.half[VX]));
                    t.extend([(rate, g, 0.0), (th, g, 0.0), (d, g, 0.0), (tr, g, 0.0)]);
                }
                Variant::SafetyFilter => {
                    if k == 0 {
                        let w0 = self.cfg.sf_weight;
                        t.push((rate, w0, p[0] / self.half[NX + DELTA_RATE]));
                        t.push((
                            tr,
                            w0,
                            (p[1] - self.center[NX + THROTTLE]) / self.half[NX + THROTTLE],
                        ));
                    } else {
                        t.extend([(tr, g, 0.0), (rate, g, 0.0)]);
                    }
                    t.extend([(de, g, 0.0), (th, g, 0.0), (d, g, 0.0)]);
                }
            }
        }
        t
    }

    fn defect(&self, z: &[f64], k: usize) -> Result<[f64; NX], EvalError> {
        let next = rk4_step(&self.state(z, k), &self.control(z, k), self.cfg.dt, self.kappa, &self.cfg.vehicle)?;
        let o = self.state_index(k + 1);
        Ok(std::array::from_fn(|i| {
            z[o + i] - (next[i] - self.center[i]) / self.half[i]
        }))
    }
}

impl<K: CurvatureFn + Sync> ParametricNlp for NmpcProblem<'_, K> {
    fn n_z(&self) -> usize {
        (self.cfg.horizon + 1) * NX + self.cfg.horizon * NU
    }

    fn n_p(&self) -> usize {
        match self.variant {
            Variant::Dynamic => super::N_PARAMS,
            Variant::Track | Variant::SafetyFilter => 2,
        }
    }

    fn n_eq(&self) -> usize {
        (self.cfg.horizon + 1) * NX + self.n_terminal()
    }

    fn n_ineq(&self) -> usize {
        self.cfg.horizon * (STATE_BOUND_ROWS + CONTROL_BOUND_ROWS)
    }

    fn cost(&self, z: &[f64], p: &[f64]) -> Result<f64, EvalError> {
        Ok(self
            .quad_terms(p)
            .into_iter()
            .map(|(i, w, t)| w * (z[i] - t).powi(2))
            .sum())
    }

    fn cost_gradient(&self, z: &[f64], p: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut g = vec![0.0; self.n_z()];
        for (i, w, t) in self.quad_terms(p) {
            g[i] += 2.0 * w * (z[i] - t);
        }
        Ok(g)
    }

    fn add_cost_hessian(&self, _z: &[f64], p: &[f64], out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        for (i, w, _) in self.quad_terms(p) {
            out[(i, i)] += 2.0 * w;
        }
        Ok(())
    }

    fn cost_gradient_param_jacobian(&self, z: &[f64], p: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let mut jac = DMatrix::zeros(self.n_z(), self.n_p());
        let n = self.cfg.horizon;
        let (hd, hv) = (self.half[D], self.half[VX]);
        for k in 0..n {
            let (xi, ui) = (self.state_index(k), self.control_index(k));
            let (d, v) = (xi + D, xi + VX);
            let (rate, tr) = (ui + DELTA_RATE, ui + THROTTLE);
            match self.variant {
                Variant::Dynamic => {
                    jac[(d, 0)] = 2.0 * (z[d] - p[1] / hd);
                    jac[(d, 1)] = -2.0 * p[0] / hd;
                    jac[(v, 2)] = 2.0 * (z[v] - (p[3] - self.center[VX]) / hv);
                    jac[(v, 3)] = -2.0 * p[2] / hv;
                    jac[(rate, 4)] = 2.0 * z[rate];
                    jac[(tr, 5)] = 2.0 * z[tr];
                }
                Variant::Track => {
                    jac[(d, 0)] = -2.0 / hd;
                    jac[(v, 1)] = -2.0 / hv;
                }
                Variant::SafetyFilter => {
                    if k == 0 {
                        let w0 = self.cfg.sf_weight;
                        jac[(rate, 0)] = -2.0 * w0 / self.half[NX + DELTA_RATE];
                        jac[(tr, 1)] = -2.0 * w0 / self.half[NX + THROTTLE];
                    }
                }
            }
        }
        Ok(jac)
    }

    fn eq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        let n = self.cfg.horizon;
        let mut g = Vec::with_capacity(self.n_eq());
        let x0s = self.scale_state(&self.x0);
        g.extend((0..NX).map(|i| z[i] - x0s[i]));
        for k in 0..n {
            g.extend(self.defect(z, k)?);
        }
        if self.n_terminal() > 0 {
            let o = self.state_index(n);
            g.push(z[o + D]);
            g.push(z[o + THETA]);
        }
        Ok(g)
    }

    fn eq_jacobian(&self, z: &[f64]) -> Result<SparseMatrix, EvalError> {
        let n = self.cfg.horizon;
        let mut t = Vec::with_capacity(NX + n * (NX + NX * STAGE));
        for i in 0..NX {
            t.push((i, i, 1.0));
        }
        for k in 0..n {
            let (jx, ju) = discrete_jacobians(
                &self.state(z, k),
                &self.control(z, k),
                self.cfg.dt,
                self.kappa,
                &self.cfg.vehicle,
            )?;
            let row0 = NX * (k + 1);
            let (xi, ui, xn) = (self.state_index(k), self.control_index(k), self.state_index(k + 1));
            for r in 0..NX {
                let inv = 1.0 / self.half[r];
                for c in 0..NX {
                    let v = jx[r][c] * self.half[c] * inv;
                    if v != 0.0 {
                        t.push((row0 + r, xi + c, -v));
                    }
                }
                for c in 0..NU {
                    let v = ju[r][c] * self.half[NX + c] * inv;
                    if v != 0.0 {
                        t.push((row0 + r, ui + c, -v));
                    }
                }
                t.push((row0 + r, xn + r, 1.0));
            }
        }
        if self.n_terminal() > 0 {
            let o = self.state_index(n);
            let row = NX * (n + 1);
            t.push((row, o + D, 1.0));
            t.push((row + 1, o + THETA, 1.0));
        }
        Ok(SparseMatrix::from_triplets(self.n_eq(), self.n_z(), t))
    }

    fn add_eq_hessian(&self, z: &[f64], lambda: &[f64], out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        for k in 0..self.cfg.horizon {
            let l = &lambda[NX * (k + 1)..NX * (k + 2)];
            let w: [f64; NX] = std::array::from_fn(|i| -l[i] / self.half[i]);
            let h = discrete_hessian_contraction(
                &self.state(z, k),
                &self.control(z, k),
                self.cfg.dt,
                self.kappa,
                &self.cfg.vehicle,
                &w,
            )?;
            let o = self.state_index(k);
            for a in 0..STAGE {
                for b in 0..STAGE {
                    out[(o + a, o + b)] += h[a][b] * self.half[a] * self.half[b];
                }
            }
        }
        Ok(())
    }

    fn ineq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        let n = self.cfg.horizon;
        let mut h = Vec::with_capacity(self.n_ineq());
        for k in 1..=n {
            let o = self.state_index(k);
            for (s, lim) in BOUNDED_STATES.iter().zip(&self.limit) {
                h.push(z[o + s] - lim);
                h.push(-z[o + s] - lim);
            }
        }
        for k in 0..n {
            let o = self.control_index(k);
            for c in 0..NU {
                let lim = if k == 0 { 1.0 } else { self.tail_limit[c] };
                h.push(z[o + c] - lim);
                h.push(-z[o + c] - lim);
            }
        }
        Ok(h)
    }

    fn ineq_jacobian(&self, _z: &[f64]) -> Result<SparseMatrix, EvalError> {
        let n = self.cfg.horizon;
        let mut t = Vec::with_capacity(self.n_ineq());
        let mut row = 0;
        for k in 1..=n {
            let o = self.state_index(k);
            for s in BOUNDED_STATES {
                t.push((row, o + s, 1.0));
                t.push((row + 1, o + s, -1.0));
                row += 2;
            }
        }
        for k in 0..n {
            let o = self.control_index(k);
            for c in 0..NU {
                t.push((row, o + c, 1.0));
                t.push((row + 1, o + c, -1.0));
                row += 2;
            }
        }
        Ok(SparseMatrix::from_triplets(self.n_ineq(), self.n_z(), t))
    }

    fn add_ineq_hessian(&self, _z: &[f64], _mu: &[f64], _out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        Ok(())
    }
}
