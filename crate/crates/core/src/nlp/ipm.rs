//! Primal-dual interior point method.
//!
//! Inequalities get slacks, `h(z) + s = 0` with `s > 0`, and a log barrier.
//! Each iteration solves the condensed Newton system
//!
//! ```txt
//!     [ W + Jhᵀ Σ Jh + δw I    Jgᵀ  ] [dz]   [ rz ]
//!     [ Jg                   -δc I ] [dλ] = [ rg ]
//! ```
//!
//! with `Σ = diag(μ / s)`. Variables and equality rows are ordered so that
//! each equality row sits right before the first variable it touches, which
//! gives a narrow envelope for stage-structured problems. `δw` is raised
//! until the factorization has exactly `n_eq` negative pivots; `δc` is a tiny
//! fixed quasi-definite shift removed again by iterative refinement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::{EnvelopeLdl, Factorization, SparseMatrix};
use super::{
    EvalError, KktPoint, KktResiduals, ParametricNlp, SolveError, SolveStatus, TOL_KKT,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial barrier parameter.
    pub mu_init: f64,
    /// Smallest barrier parameter.
    pub mu_final: f64,
    /// Linear barrier decrease factor.
    pub mu_decrease: f64,
    /// Superlinear barrier decrease exponent.
    pub mu_superlinear: f64,
    /// Barrier subproblem accuracy relative to the barrier parameter.
    pub barrier_tol_factor: f64,
    /// Lower bound of the fraction-to-boundary parameter.
    pub tau_min: f64,
    /// Minimum initial slack.
    pub slack_push: f64,
    /// First nonzero primal regularization tried.
    pub reg_init: f64,
    pub reg_max: f64,
    /// Quasi-definite shift on the equality block.
    pub dual_reg: f64,
    pub max_restoration_iter: usize,
    /// Record per-iteration residuals.
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: TOL_KKT,
            max_iter: 200,
            mu_init: 1e-1,
            mu_final: 1e-9,
            mu_decrease: 0.2,
            mu_superlinear: 1.5,
            barrier_tol_factor: 10.0,
            tau_min: 0.99,
            slack_push: 1e-2,
            reg_init: 1e-8,
            reg_max: 1e12,
            dual_reg: 1e-9,
            max_restoration_iter: 50,
            trace: false,
        }
    }
}

/// Initial primal and (optionally) dual values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmStart {
    pub z: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    /// Starting barrier parameter; `None` uses the solver default.
    pub barrier: Option<f64>,
}

impl WarmStart {
    pub fn primal(z: Vec<f64>) -> Self {
        Self {
            z,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub barrier: f64,
    pub alpha_primal: f64,
    pub alpha_dual: f64,
    pub regularization: f64,
}

#[derive(Clone, Debug, Default)]
pub struct InteriorPoint {
    pub options: SolverOptions,
}

/// Everything evaluated at the current primal point.
struct Eval {
    f: f64,
    grad: Vec<f64>,
    g: Vec<f64>,
    jg: SparseMatrix,
    h: Vec<f64>,
    jh: SparseMatrix,
}

fn evaluate<N: ParametricNlp + ?Sized>(nlp: &N, z: &[f64], p: &[f64]) -> Result<Eval, EvalError> {
    let mut ev = evaluate_values(nlp, z, p)?;
    complete(nlp, z, p, &mut ev)?;
    Ok(ev)
}

/// Function values only; derivatives are filled in by [`complete`] once a
/// trial point is accepted.
fn evaluate_values<N: ParametricNlp + ?Sized>(
    nlp: &N,
    z: &[f64],
    p: &[f64],
) -> Result<Eval, EvalError> {
    Ok(Eval {
        f: nlp.cost(z, p)?,
        grad: Vec::new(),
        g: nlp.eq_values(z)?,
        jg: SparseMatrix::zeros(0, 0),
        h: nlp.ineq_values(z)?,
        jh: SparseMatrix::zeros(0, 0),
    })
}

fn complete<N: ParametricNlp + ?Sized>(
    nlp: &N,
    z: &[f64],
    p: &[f64],
    ev: &mut Eval,
) -> Result<(), EvalError> {
    ev.grad = nlp.cost_gradient(z, p)?;
    ev.jg = nlp.eq_jacobian(z)?;
    ev.jh = nlp.ineq_jacobian(z)?;
    Ok(())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Largest step in `(0, 1]` keeping `x + α dx >= (1 - τ) x`.
fn fraction_to_boundary(x: &[f64], dx: &[f64], tau: f64) -> f64 {
    x.iter().zip(dx).fold(1.0, |a, (&xi, &di)| {
        if di < 0.0 {
            a.min(-tau * xi / di)
        } else {
            a
        }
    })
}

/// Condensed KKT matrix in the envelope-friendly ordering.
struct KktSystem {
    n: usize,
    m: usize,
    /// position -> original index (`< n` primal, `>= n` equality row)
    perm: Vec<usize>,
    /// original index -> position
    pos: Vec<usize>,
    mat: DMatrix<f64>,
}

impl KktSystem {
    fn new(n: usize, jg: &SparseMatrix) -> Self {
        let m = jg.rows();
        let mut keys: Vec<(usize, u8, usize)> = (0..n).map(|j| (j, 1, j)).collect();
        for (r, first) in jg.first_cols().into_iter().enumerate() {
            keys.push((first.unwrap_or(n), 0, n + r));
        }
        keys.sort();
        let perm: Vec<usize> = keys.into_iter().map(|k| k.2).collect();
        let mut pos = vec![0; n + m];
        for (i, &o) in perm.iter().enumerate() {
            pos[o] = i;
        }
        Self {
            n,
            m,
            perm,
            pos,
            mat: DMatrix::zeros(n + m, n + m),
        }
    }

    fn assemble(&mut self, hess: &DMatrix<f64>, jg: &SparseMatrix, reg: f64, dual_reg: f64) {
        self.mat.fill(0.0);
        let n = self.n;
        for j in 0..n {
            let pj = self.pos[j];
            for i in 0..n {
                let v = hess[(i, j)];
                if v != 0.0 {
                    self.mat[(self.pos[i], pj)] = v;
                }
            }
            self.mat[(pj, pj)] += reg;
        }
        for r in 0..self.m {
            let pr = self.pos[n + r];
            for (c, v) in jg.row(r) {
                let pc = self.pos[c];
                self.mat[(pr, pc)] += v;
                self.mat[(pc, pr)] += v;
            }
            self.mat[(pr, pr)] = -dual_reg;
        }
    }

    /// `K x` with the dual shift removed (the system we actually want).
    fn apply_exact(&self, x: &[f64], dual_reg: f64) -> Vec<f64> {
        let dim = self.n + self.m;
        let mut y = vec![0.0; dim];
        for j in 0..dim {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let col = self.mat.column(j);
            for (yi, &a) in y.iter_mut().zip(col.iter()) {
                *yi += a * xj;
            }
        }
        for i in 0..dim {
            if self.perm[i] >= self.n {
                y[i] += dual_reg * x[i];
            }
        }
        y
    }

    /// Solve in original coordinates with iterative refinement.
    fn solve(&self, fact: &EnvelopeLdl, rhs: &[f64], dual_reg: f64) -> Vec<f64> {
        let dim = self.n + self.m;
        let b: Vec<f64> = self.perm.iter().map(|&o| rhs[o]).collect();
        let bnorm = inf_norm(&b).max(1.0);
        let mut x = b.clone();
        fact.solve_in_place(&mut x);
        let mut res_norm = f64::INFINITY;
        for _ in 0..10 {
            let kx = self.apply_exact(&x, dual_reg);
            let mut r: Vec<f64> = b.iter().zip(&kx).map(|(a, c)| a - c).collect();
            let rn = inf_norm(&r);
            if rn <= 1e-14 * bnorm || rn >= 0.5 * res_norm {
                res_norm = rn.min(res_norm);
                break;
            }
            res_norm = rn;
            fact.solve_in_place(&mut r);
            for (xi, ri) in x.iter_mut().zip(&r) {
                *xi += ri;
            }
        }
        if !(res_norm <= 1e-8 * bnorm) {
            // refinement stalled: fall back to a pivoted dense solve
            let mut k = self.mat.clone();
            for i in 0..dim {
                if self.perm[i] >= self.n {
                    k[(i, i)] += dual_reg;
                }
            }
            if let Some(sol) = k.lu().solve(&DVector::from_column_slice(&b)) {
                if sol.iter().all(|v| v.is_finite()) {
                    x = sol.as_slice().to_vec();
                }
            }
        }
        let mut out = vec![0.0; dim];
        for (i, &o) in self.perm.iter().enumerate() {
            out[o] = x[i];
        }
        out
    }
}

/// Factor with the smallest primal regularization giving correct inertia.
fn factor_with_inertia(
    sys: &mut KktSystem,
    hess: &DMatrix<f64>,
    jg: &SparseMatrix,
    opts: &SolverOptions,
    last_reg: f64,
) -> Option<(EnvelopeLdl, f64)> {
    let mut reg = 0.0;
    loop {
        sys.assemble(hess, jg, reg, opts.dual_reg);
        if let Factorization::Ok(f) = EnvelopeLdl::factor(&sys.mat, 1e-300) {
            if f.negative_pivots() == sys.m {
                return Some((f, reg));
            }
        }
        reg = if reg == 0.0 {
            if last_reg > 0.0 {
                (0.25 * last_reg).max(opts.reg_init)
            } else {
                opts.reg_init
            }
        } else {
            2.0 * reg
        };
        if reg > opts.reg_max {
            return None;
        }
    }
}

struct Iterate {
    z: Vec<f64>,
    s: Vec<f64>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
}

impl InteriorPoint {
    pub fn new(options: SolverOptions) -> Self {
        Self { options }
    }

    /// Solve from a primal initial guess.
    pub fn solve<N: ParametricNlp + ?Sized>(
        &self,
        nlp: &N,
        p: &[f64],
        z0: &[f64],
    ) -> Result<KktPoint, SolveError> {
        self.solve_warm(nlp, p, &WarmStart::primal(z0.to_vec()))
    }

    pub fn solve_warm<N: ParametricNlp + ?Sized>(
        &self,
        nlp: &N,
        p: &[f64],
        warm: &WarmStart,
    ) -> Result<KktPoint, SolveError> {
        let opts = &self.options;
        let (n, m, q) = (nlp.n_z(), nlp.n_eq(), nlp.n_ineq());
        if warm.z.len() != n {
            return Err(SolveError::Dimension {
                expected: n,
                got: warm.z.len(),
            });
        }
        if warm.z.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite);
        }

        let mut ev = evaluate(nlp, &warm.z, p)?;
        let mut barrier = warm.barrier.unwrap_or(opts.mu_init).max(opts.mu_final);
        let s: Vec<f64> = ev.h.iter().map(|&h| (-h).max(opts.slack_push)).collect();
        let mu = match &warm.mu {
            Some(mu) if mu.len() == q => mu
                .iter()
                .zip(&s)
                .map(|(&v, &si)| v.max(barrier / si * 1e-2).max(1e-12))
                .collect(),
            _ => s.iter().map(|&si| barrier / si).collect(),
        };
        let lambda = match &warm.lambda {
            Some(l) if l.len() == m => l.clone(),
            _ => vec![0.0; m],
        };
        let mut it = Iterate {
            z: warm.z.clone(),
            s,
            lambda,
            mu,
        };

        let mut sys = KktSystem::new(n, &ev.jg);
        let mut last_reg = 0.0;
        let mut nu = 1.0;
        let mut trace = Vec::new();
        let mut best: Option<(f64, Iterate, KktResiduals)> = None;
        let mut status = SolveStatus::MaxIter;
        let mut iterations = 0;
        let mut stalls = 0;

        for iter in 0..=opts.max_iter {
            iterations = iter;
            let res = residuals_from_eval(&ev, &it);
            let score = res.max();
            if best.as_ref().map_or(true, |b| score < b.0) {
                best = Some((
                    score,
                    Iterate {
                        z: it.z.clone(),
                        s: it.s.clone(),
                        lambda: it.lambda.clone(),
                        mu: it.mu.clone(),
                    },
                    res,
                ));
            }
            if res.within(opts.tol) {
                status = SolveStatus::Converged;
                break;
            }
            if iter == opts.max_iter {
                break;
            }

            // barrier update (possibly several times in one iteration)
            loop {
                let err = barrier_error(&ev, &it, barrier);
                if err <= opts.barrier_tol_factor * barrier && barrier > opts.mu_final {
                    barrier = (opts.mu_decrease * barrier)
                        .min(barrier.powf(opts.mu_superlinear))
                        .max(opts.mu_final);
                } else {
                    break;
                }
            }

            let hess = match nlp.lagrangian_hessian(&it.z, p, &it.lambda, &it.mu) {
                Ok(h) => h,
                Err(_) => break,
            };
            let sigma: Vec<f64> = it.mu.iter().zip(&it.s).map(|(m, s)| m / s).collect();
            let mut cond = hess;
            add_jt_diag_j(&ev.jh, &sigma, &mut cond);
            let Some((fact, reg)) = factor_with_inertia(&mut sys, &cond, &ev.jg, opts, last_reg)
            else {
                log::debug!("ipm: inertia correction failed at iteration {iter}");
                break;
            };
            if reg > 0.0 {
                last_reg = reg;
            }

            let r_h: Vec<f64> = ev.h.iter().zip(&it.s).map(|(h, s)| h + s).collect();
            let dir = newton_direction(&sys, &fact, opts, &ev, &it, &sigma, &r_h, &ev.g, barrier);
            let tau = opts.tau_min.max(1.0 - barrier);
            let alpha_max = fraction_to_boundary(&it.s, &dir.ds, tau);
            let alpha_dual = fraction_to_boundary(&it.mu, &dir.dmu, tau);

            let lam_next = inf_norm(
                &it.lambda
                    .iter()
                    .zip(&dir.dl)
                    .map(|(a, b)| a + b)
                    .collect::<Vec<_>>(),
            );
            let mu_next = inf_norm(&it.mu.iter().zip(&dir.dmu).map(|(a, b)| a + b).collect::<Vec<_>>());
            // Powell's update, so early multiplier spikes do not persist
            let need = 1.1 * lam_next.max(mu_next) + 1e-3;
            nu = need.max(0.5 * (nu + need));

            let theta0 = l1_norm(&ev.g) + l1_norm(&r_h);
            let phi0 = merit(ev.f, &it.s, barrier, nu, theta0);
            let slope = dot(&ev.grad, &dir.dz)
                - barrier * it.s.iter().zip(&dir.ds).map(|(s, d)| d / s).sum::<f64>()
                - nu * theta0;

            let accepted = line_search(
                nlp, p, &it, &dir, alpha_max, phi0, slope, barrier, nu, &sys, &fact, opts, &ev,
                &sigma, tau,
            );
            let (alpha, new_it, new_ev) = match accepted {
                Some(a) => {
                    stalls = 0;
                    a
                }
                None => {
                    stalls += 1;
                    if theta0 > 1e-6 {
                        match restoration(nlp, p, &it, &ev, opts, &mut sys, barrier) {
                            Some((r_it, r_ev)) => {
                                it = r_it;
                                ev = r_ev;
                                nu = 1.0;
                                continue;
                            }
                            None => {
                                status = SolveStatus::Infeasible;
                                break;
                            }
                        }
                    }
                    if stalls > 5 {
                        break;
                    }
                    // take a tiny step to escape numerical noise
                    let alpha = alpha_max * 1e-3;
                    match take_step(nlp, p, &it, &dir, alpha) {
                        Some((ni, ne)) => (alpha, ni, ne),
                        None => break,
                    }
                }
            };

            let dl = &dir.dl;
            it = new_it;
            for (l, d) in it.lambda.iter_mut().zip(dl) {
                *l += alpha * d;
            }
            for ((m, d), s) in it.mu.iter_mut().zip(&dir.dmu).zip(&it.s) {
                let v = *m + alpha_dual * d;
                // keep μ s within a bounded factor of the barrier
                let lo = barrier / (1e10 * s);
                let hi = 1e10 * barrier / s;
                *m = v.clamp(lo, hi.max(lo));
            }
            ev = new_ev;
            if complete(nlp, &it.z, p, &mut ev).is_err() {
                break;
            }

            if opts.trace {
                let r = residuals_from_eval(&ev, &it);
                trace.push(TraceRow {
                    iter: iter + 1,
                    stationarity: r.stationarity,
                    feasibility: r.feasibility,
                    complementarity: r.complementarity,
                    barrier,
                    alpha_primal: alpha,
                    alpha_dual,
                    regularization: reg,
                });
            }
        }

        let final_it = if status == SolveStatus::Converged {
            it
        } else {
            best.map(|b| b.1).unwrap_or(it)
        };
        let residuals = super::kkt_residuals(nlp, p, &final_it.z, &final_it.lambda, &final_it.mu)?;
        let ineq = nlp.ineq_values(&final_it.z)?;
        if status == SolveStatus::Converged && !residuals.within(opts.tol) {
            status = SolveStatus::MaxIter;
        }
        Ok(KktPoint {
            z: final_it.z,
            lambda: final_it.lambda,
            mu: final_it.mu,
            ineq,
            residuals,
            status,
            iterations,
            trace,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn merit(f: f64, s: &[f64], barrier: f64, nu: f64, theta: f64) -> f64 {
    f - barrier * s.iter().map(|v| v.ln()).sum::<f64>() + nu * theta
}

/// `out += Jᵀ diag(w) J`
fn add_jt_diag_j(j: &SparseMatrix, w: &[f64], out: &mut DMatrix<f64>) {
    for (r, &wr) in w.iter().enumerate() {
        let row: Vec<(usize, f64)> = j.row(r).collect();
        for &(a, va) in &row {
            for &(b, vb) in &row {
                out[(a, b)] += wr * va * vb;
            }
        }
    }
}

fn residuals_from_eval(ev: &Eval, it: &Iterate) -> KktResiduals {
    let mut grad = ev.grad.clone();
    ev.jg.tr_mul_acc(&it.lambda, &mut grad);
    ev.jh.tr_mul_acc(&it.mu, &mut grad);
    let viol = ev.h.iter().fold(0.0_f64, |m, &v| m.max(v.max(0.0)));
    KktResiduals {
        stationarity: inf_norm(&grad),
        feasibility: inf_norm(&ev.g).max(viol),
        complementarity: it
            .mu
            .iter()
            .zip(&ev.h)
            .fold(0.0_f64, |m, (a, b)| m.max((a * b).abs())),
    }
}

fn barrier_error(ev: &Eval, it: &Iterate, barrier: f64) -> f64 {
    let mut grad = ev.grad.clone();
    ev.jg.tr_mul_acc(&it.lambda, &mut grad);
    ev.jh.tr_mul_acc(&it.mu, &mut grad);
    let rh = ev
        .h
        .iter()
        .zip(&it.s)
        .fold(0.0_f64, |m, (h, s)| m.max((h + s).abs()));
    let rc = it
        .s
        .iter()
        .zip(&it.mu)
        .fold(0.0_f64, |m, (s, mu)| m.max((s * mu - barrier).abs()));
    inf_norm(&grad).max(inf_norm(&ev.g)).max(rh).max(rc)
}

struct Direction {
    dz: Vec<f64>,
    dl: Vec<f64>,
    ds: Vec<f64>,
    dmu: Vec<f64>,
}

/// Newton direction for the given constraint residuals (`r_h = h + s`,
/// `r_g = g`); passing modified residuals yields a second-order correction.
#[allow(clippy::too_many_arguments)]
fn newton_direction(
    sys: &KktSystem,
    fact: &EnvelopeLdl,
    opts: &SolverOptions,
    ev: &Eval,
    it: &Iterate,
    sigma: &[f64],
    r_h: &[f64],
    r_g: &[f64],
    barrier: f64,
) -> Direction {
    let n = sys.n;
    // rz = -(∇f + Jgᵀλ + Jhᵀ(Σ r_h + barrier / s))
    let mut rz = ev.grad.clone();
    ev.jg.tr_mul_acc(&it.lambda, &mut rz);
    let w: Vec<f64> = sigma
        .iter()
        .zip(r_h)
        .zip(&it.s)
        .map(|((sg, rh), s)| sg * rh + barrier / s)
        .collect();
    ev.jh.tr_mul_acc(&w, &mut rz);
    let mut rhs: Vec<f64> = rz.iter().map(|v| -v).collect();
    rhs.extend(r_g.iter().map(|v| -v));
    let sol = sys.solve(fact, &rhs, opts.dual_reg);
    let dz = sol[..n].to_vec();
    let dl = sol[n..].to_vec();
    let jdz = ev.jh.mul_vec(&dz);
    let ds: Vec<f64> = r_h.iter().zip(&jdz).map(|(r, j)| -r - j).collect();
    let dmu: Vec<f64> = (0..it.s.len())
        .map(|i| sigma[i] * (jdz[i] + r_h[i]) - it.mu[i] + barrier / it.s[i])
        .collect();
    Direction { dz, dl, ds, dmu }
}

fn take_step<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    it: &Iterate,
    dir: &Direction,
    alpha: f64,
) -> Option<(Iterate, Eval)> {
    let z: Vec<f64> = it.z.iter().zip(&dir.dz).map(|(a, b)| a + alpha * b).collect();
    let s: Vec<f64> = it.s.iter().zip(&dir.ds).map(|(a, b)| a + alpha * b).collect();
    if s.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let ev = evaluate_values(nlp, &z, p).ok()?;
    if !ev.f.is_finite() {
        return None;
    }
    Some((
        Iterate {
            z,
            s,
            lambda: it.lambda.clone(),
            mu: it.mu.clone(),
        },
        ev,
    ))
}

/// Backtracking on the l1 merit function with one second-order correction.
#[allow(clippy::too_many_arguments)]
fn line_search<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    it: &Iterate,
    dir: &Direction,
    alpha_max: f64,
    phi0: f64,
    slope: f64,
    barrier: f64,
    nu: f64,
    sys: &KktSystem,
    fact: &EnvelopeLdl,
    opts: &SolverOptions,
    ev: &Eval,
    sigma: &[f64],
    tau: f64,
) -> Option<(f64, Iterate, Eval)> {
    const ARMIJO: f64 = 1e-4;
    let noise = 1e-13 * (1.0 + phi0.abs());
    let accept = |phi: f64, alpha: f64| phi <= phi0 + ARMIJO * alpha * slope.min(0.0) + noise;
    let phi_of = |t_it: &Iterate, t_ev: &Eval| {
        let r_h: Vec<f64> = t_ev.h.iter().zip(&t_it.s).map(|(h, s)| h + s).collect();
        merit(t_ev.f, &t_it.s, barrier, nu, l1_norm(&t_ev.g) + l1_norm(&r_h))
    };

    let mut alpha = alpha_max;
    let mut first = true;
    while alpha > 1e-14 {
        if let Some((t_it, t_ev)) = take_step(nlp, p, it, dir, alpha) {
            let phi = phi_of(&t_it, &t_ev);
            if accept(phi, alpha) {
                return Some((alpha, t_it, t_ev));
            }
            if first && alpha_max == 1.0 {
                if let Some(found) = second_order_corrections(
                    nlp, p, it, ev, sys, fact, opts, sigma, barrier, tau, (&t_it, &t_ev), &phi_of, &accept,
                ) {
                    return Some(found);
                }
            }
        }
        first = false;
        alpha *= 0.5;
    }
    None
}

/// Up to `MAX_SOC` second-order corrections of a rejected full step. Each
/// accumulates the constraint residuals of the previous trial point; the
/// multipliers follow the original direction.
#[allow(clippy::too_many_arguments)]
fn second_order_corrections<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    it: &Iterate,
    ev: &Eval,
    sys: &KktSystem,
    fact: &EnvelopeLdl,
    opts: &SolverOptions,
    sigma: &[f64],
    barrier: f64,
    tau: f64,
    trial: (&Iterate, &Eval),
    phi_of: &dyn Fn(&Iterate, &Eval) -> f64,
    accept: &dyn Fn(f64, f64) -> bool,
) -> Option<(f64, Iterate, Eval)> {
    const MAX_SOC: usize = 4;
    let residuals = |t_it: &Iterate, t_ev: &Eval| {
        let rh: Vec<f64> = t_ev.h.iter().zip(&t_it.s).map(|(h, s)| h + s).collect();
        let theta = l1_norm(&t_ev.g) + l1_norm(&rh);
        (rh, t_ev.g.clone(), theta)
    };
    let mut r_h: Vec<f64> = ev.h.iter().zip(&it.s).map(|(h, s)| h + s).collect();
    let mut r_g = ev.g.clone();
    let (mut last_h, mut last_g, mut last_theta) = residuals(trial.0, trial.1);
    for _ in 0..MAX_SOC {
        for (r, v) in r_h.iter_mut().zip(&last_h) {
            *r += v;
        }
        for (r, v) in r_g.iter_mut().zip(&last_g) {
            *r += v;
        }
        let soc = newton_direction(sys, fact, opts, ev, it, sigma, &r_h, &r_g, barrier);
        if fraction_to_boundary(&it.s, &soc.ds, tau) < 1.0 {
            return None;
        }
        let (c_it, c_ev) = take_step(nlp, p, it, &soc, 1.0)?;
        if accept(phi_of(&c_it, &c_ev), 1.0) {
            return Some((1.0, c_it, c_ev));
        }
        let (h, g, theta) = residuals(&c_it, &c_ev);
        if theta > 0.99 * last_theta {
            return None;
        }
        (last_h, last_g, last_theta) = (h, g, theta);
    }
    None
}

/// Reduce constraint violation with minimum-norm Newton steps (objective
/// ignored). Returns a less infeasible iterate or `None` if stuck.
fn restoration<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    start: &Iterate,
    ev0: &Eval,
    opts: &SolverOptions,
    sys: &mut KktSystem,
    barrier: f64,
) -> Option<(Iterate, Eval)> {
    let theta = |ev: &Eval, it: &Iterate| {
        l1_norm(&ev.g)
            + ev.h
                .iter()
                .zip(&it.s)
                .map(|(h, s)| (h + s).abs())
                .sum::<f64>()
    };
    let theta0 = theta(ev0, start);
    let mut it = Iterate {
        z: start.z.clone(),
        s: start.s.clone(),
        lambda: start.lambda.clone(),
        mu: start.mu.clone(),
    };
    let mut ev = evaluate(nlp, &it.z, p).ok()?;
    let n = nlp.n_z();
    for _ in 0..opts.max_restoration_iter {
        let th = theta(&ev, &it);
        if th <= 0.1 * theta0 || th <= opts.tol {
            it.lambda.iter_mut().for_each(|l| *l = 0.0);
            it.mu = it.s.iter().map(|s| barrier / s).collect();
            return Some((it, ev));
        }
        let sigma: Vec<f64> = it.mu.iter().zip(&it.s).map(|(m, s)| m / s).collect();
        let mut cond = DMatrix::identity(n, n) * 1e-4;
        add_jt_diag_j(&ev.jh, &sigma, &mut cond);
        let (fact, _) = factor_with_inertia(sys, &cond, &ev.jg, opts, 0.0)?;
        let r_h: Vec<f64> = ev.h.iter().zip(&it.s).map(|(h, s)| h + s).collect();
        let zero_grad = Eval {
            f: 0.0,
            grad: vec![0.0; n],
            g: ev.g.clone(),
            jg: ev.jg.clone(),
            h: ev.h.clone(),
            jh: ev.jh.clone(),
        };
        let frozen = Iterate {
            z: it.z.clone(),
            s: it.s.clone(),
            lambda: vec![0.0; it.lambda.len()],
            mu: it.mu.clone(),
        };
        let dir = newton_direction(sys, &fact, opts, &zero_grad, &frozen, &sigma, &r_h, &ev.g, 0.0);
        let mut alpha = fraction_to_boundary(&it.s, &dir.ds, 0.99);
        let mut moved = false;
        while alpha > 1e-10 {
            if let Some((t_it, t_ev)) = take_step(nlp, p, &it, &dir, alpha) {
                if theta(&t_ev, &t_it) <= (1.0 - 1e-4 * alpha) * th {
                    it = t_it;
                    ev = t_ev;
                    complete(nlp, &it.z, p, &mut ev).ok()?;
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            return None;
        }
    }
    None
}
