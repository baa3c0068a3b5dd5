//! Smooth parametric nonlinear programs and their KKT points.
//!
//! ```txt
//!     min_z  l(z, p)   s.t.  g(z) = 0,  h(z) <= 0
//! ```
//!
//! with Lagrangian `L = l + λᵀg + μᵀh`. Constraints do not depend on `p`.

mod check;
mod ipm;
pub mod linalg;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vehicle::DynamicsError;

pub use check::{check_derivatives, DerivativeReport};
pub use ipm::{InteriorPoint, SolverOptions, TraceRow, WarmStart};
pub use linalg::SparseMatrix;

/// Default KKT tolerance.
pub const TOL_KKT: f64 = 1e-8;
/// Default activity threshold for inequalities.
pub const TOL_ACT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("initial guess has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("initial guess contains non-finite values")]
    NonFinite,
    #[error("evaluation failed at the initial guess: {0}")]
    Eval(#[from] EvalError),
}

/// A parametric NLP. Hessians are accumulated into dense symmetric
/// matrices; Jacobians are sparse.
pub trait ParametricNlp: Sync {
    fn n_z(&self) -> usize;
    fn n_p(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;

    fn cost(&self, z: &[f64], p: &[f64]) -> Result<f64, EvalError>;
    fn cost_gradient(&self, z: &[f64], p: &[f64]) -> Result<Vec<f64>, EvalError>;
    /// `out += ∇²_z l`
    fn add_cost_hessian(&self, z: &[f64], p: &[f64], out: &mut DMatrix<f64>)
        -> Result<(), EvalError>;
    /// `∂(∇_z l)/∂p`, shape `n_z × n_p`.
    fn cost_gradient_param_jacobian(&self, z: &[f64], p: &[f64])
        -> Result<DMatrix<f64>, EvalError>;

    fn eq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError>;
    fn eq_jacobian(&self, z: &[f64]) -> Result<SparseMatrix, EvalError>;
    /// `out += Σ λ_i ∇²g_i`
    fn add_eq_hessian(&self, z: &[f64], lambda: &[f64], out: &mut DMatrix<f64>)
        -> Result<(), EvalError>;

    fn ineq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError>;
    fn ineq_jacobian(&self, z: &[f64]) -> Result<SparseMatrix, EvalError>;
    /// `out += Σ μ_i ∇²h_i`
    fn add_ineq_hessian(&self, z: &[f64], mu: &[f64], out: &mut DMatrix<f64>)
        -> Result<(), EvalError>;

    /// Exact Hessian of the Lagrangian.
    fn lagrangian_hessian(
        &self,
        z: &[f64],
        p: &[f64],
        lambda: &[f64],
        mu: &[f64],
    ) -> Result<DMatrix<f64>, EvalError> {
        let n = self.n_z();
        let mut h = DMatrix::zeros(n, n);
        self.add_cost_hessian(z, p, &mut h)?;
        self.add_eq_hessian(z, lambda, &mut h)?;
        self.add_ineq_hessian(z, mu, &mut h)?;
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.feasibility <= tol && self.complementarity <= tol
    }
}

/// Primal-dual point returned by the solver.
#[derive(Clone, Debug, PartialEq)]
pub struct KktPoint {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// `h(z)` at the returned point.
    pub ineq: Vec<f64>,
    pub residuals: KktResiduals,
    pub status: SolveStatus,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

impl KktPoint {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Gradient of the Lagrangian with respect to `z`.
pub fn lagrangian_gradient<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
) -> Result<Vec<f64>, EvalError> {
    let mut grad = nlp.cost_gradient(z, p)?;
    nlp.eq_jacobian(z)?.tr_mul_acc(lambda, &mut grad);
    nlp.ineq_jacobian(z)?.tr_mul_acc(mu, &mut grad);
    Ok(grad)
}

/// Recompute the residual triple from scratch at `(z, λ, μ)`.
pub fn kkt_residuals<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
) -> Result<KktResiduals, EvalError> {
    let grad = lagrangian_gradient(nlp, p, z, lambda, mu)?;
    let g = nlp.eq_values(z)?;
    let h = nlp.ineq_values(z)?;
    let viol = h.iter().fold(0.0_f64, |m, &v| m.max(v.max(0.0)));
    let comp = mu
        .iter()
        .zip(&h)
        .fold(0.0_f64, |m, (a, b)| m.max((a * b).abs()));
    Ok(KktResiduals {
        stationarity: inf_norm(&grad),
        feasibility: inf_norm(&g).max(viol),
        complementarity: comp,
    })
}

/// Residuals of a returned point.
pub fn point_residuals<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    point: &KktPoint,
) -> Result<KktResiduals, EvalError> {
    kkt_residuals(nlp, p, &point.z, &point.lambda, &point.mu)
}

/// Active inequalities and weakly active ones (both `h` and `μ` near zero,
/// which breaks strict complementarity).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActiveSet {
    pub active: Vec<usize>,
    pub weak: Vec<usize>,
}

impl ActiveSet {
    pub fn has_weak(&self) -> bool {
        !self.weak.is_empty()
    }
}

///
/// A row is active when `h >= -tol_act` or its multiplier dominates the
/// residual slack. Interior point iterates approach a weakly active row
/// with `h` and `μ` both of order `sqrt(barrier)`, hence the wider band
/// `WEAK_FACTOR * tol_act` for the weak test.
pub fn active_set(point: &KktPoint, tol_act: f64) -> ActiveSet {
    let mut set = ActiveSet::default();
    let band = WEAK_FACTOR * tol_act;
    for (i, (&h, &mu)) in point.ineq.iter().zip(&point.mu).enumerate() {
        if h >= -tol_act || mu > -h {
            set.active.push(i);
        }
        if h.abs() <= band && mu <= band {
            set.weak.push(i);
        }
    }
    set
}

const WEAK_FACTOR: f64 = 1000.0;

/// Write a solver trace as CSV.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "iter,stationarity,feasibility,complementarity,barrier,alpha_primal,alpha_dual,regularization"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.iter,
            r.stationarity,
            r.feasibility,
            r.complementarity,
            r.barrier,
            r.alpha_primal,
            r.alpha_dual,
            r.regularization
        )?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod test_problems;

#[cfg(test)]
mod tests;
