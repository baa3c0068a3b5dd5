//! Parametric sensitivities of a KKT point via the implicit function theorem.
//!
//! Active inequalities are promoted to equalities and inactive ones dropped,
//! giving the residual
//!
//! ```txt
//!     F(z̃, p) = [ ∇_z l + Jgᵀλ + J_Aᵀμ_A ;  g(z) ;  h_A(z) ],   z̃ = (z, λ, μ_A)
//! ```
//!
//! whose Jacobian `∂F/∂z̃` is nonsingular under LICQ, SOSC and strict
//! complementarity. Then `dz̃/dp = -(∂F/∂z̃)⁻¹ ∂F/∂p`.

use nalgebra::{DMatrix, DVector, LU, SVD};
use thiserror::Error;

use crate::nlp::{active_set, EvalError, KktPoint, ParametricNlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assumption {
    /// Linear independence of active constraint gradients.
    Licq,
    /// Second-order sufficiency on the critical cone.
    Sosc,
}

impl std::fmt::Display for Assumption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Assumption::Licq => "LICQ",
            Assumption::Sosc => "SOSC",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("KKT point is not converged")]
    NotConverged,
    #[error("strict complementarity fails at inequalities {0:?}")]
    WeakActivity(Vec<usize>),
    #[error("singular KKT matrix ({0} fails)")]
    Degenerate(Assumption),
    #[error("cotangent has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Factored reduced KKT system at a converged point. Immutable once built.
#[derive(Clone, Debug)]
pub struct SensitivitySystem {
    n_z: usize,
    n_eq: usize,
    active: Vec<usize>,
    kkt: DMatrix<f64>,
    param_jacobian: DMatrix<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Relative pivot size below which the KKT matrix counts as singular.
const SINGULAR_RTOL: f64 = 1e-13;

impl SensitivitySystem {
    pub fn kkt_matrix(&self) -> &DMatrix<f64> {
        &self.kkt
    }

    pub fn param_jacobian(&self) -> &DMatrix<f64> {
        &self.param_jacobian
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn n_p(&self) -> usize {
        self.param_jacobian.ncols()
    }

    /// Gradient over `p` of `⟨z̄, z*(p)⟩`: `-(∂F/∂p)ᵀ (∂F/∂z̃)⁻ᵀ [z̄; 0]`.
    pub fn adjoint(&self, zbar: &[f64]) -> Result<Vec<f64>, SensitivityError> {
        if zbar.len() != self.n_z {
            return Err(SensitivityError::Dimension {
                expected: self.n_z,
                got: zbar.len(),
            });
        }
        let dim = self.kkt.nrows();
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, self.n_z).copy_from_slice(zbar);
        // solve Kᵀ y = rhs through the transposed factors
        let y = self
            .lu
            .u()
            .transpose()
            .solve_lower_triangular(&rhs)
            .and_then(|w| self.lu.l().transpose().solve_upper_triangular(&w))
            .ok_or(SensitivityError::Degenerate(Assumption::Sosc))?;
        let mut y_perm = y;
        self.lu.p().inv_permute_rows(&mut y_perm);
        let grad = -(self.param_jacobian.transpose() * y_perm);
        Ok(grad.as_slice().to_vec())
    }

    /// Directional derivative of `z*` along `dp`.
    pub fn forward_jacobian(&self, dp: &[f64]) -> Result<Vec<f64>, SensitivityError> {
        if dp.len() != self.n_p() {
            return Err(SensitivityError::Dimension {
                expected: self.n_p(),
                got: dp.len(),
            });
        }
        let rhs = -(&self.param_jacobian * DVector::from_column_slice(dp));
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or(SensitivityError::Degenerate(Assumption::Sosc))?;
        Ok(sol.rows(0, self.n_z).as_slice().to_vec())
    }

    /// Full `dz*/dp`, one forward solve per parameter.
    pub fn jacobian(&self) -> Result<DMatrix<f64>, SensitivityError> {
        let mut out = DMatrix::zeros(self.n_z, self.n_p());
        for k in 0..self.n_p() {
            let mut e = vec![0.0; self.n_p()];
            e[k] = 1.0;
            let col = self.forward_jacobian(&e)?;
            out.column_mut(k).copy_from_slice(&col);
        }
        Ok(out)
    }

    pub fn n_eq(&self) -> usize {
        self.n_eq
    }
}

/// Assemble and factor the reduced KKT system at `point`.
pub fn build_sensitivity<N: ParametricNlp + ?Sized>(
    nlp: &N,
    p: &[f64],
    point: &KktPoint,
    tol_act: f64,
) -> Result<SensitivitySystem, SensitivityError> {
    if !point.converged() {
        return Err(SensitivityError::NotConverged);
    }
    let set = active_set(point, tol_act);
    if set.has_weak() {
        return Err(SensitivityError::WeakActivity(set.weak));
    }
    let (n, m, a) = (nlp.n_z(), nlp.n_eq(), set.active.len());
    let dim = n + m + a;
    let z = &point.z;

    let hess = nlp.lagrangian_hessian(z, p, &point.lambda, &point.mu)?;
    let jg = nlp.eq_jacobian(z)?;
    let ja = nlp.ineq_jacobian(z)?.select_rows(&set.active);

    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
    for (off, jac) in [(n, &jg), (n + m, &ja)] {
        for r in 0..jac.rows() {
            for (c, v) in jac.row(r) {
                kkt[(off + r, c)] += v;
                kkt[(c, off + r)] += v;
            }
        }
    }
    let mut param_jacobian = DMatrix::zeros(dim, nlp.n_p());
    param_jacobian
        .view_mut((0, 0), (n, nlp.n_p()))
        .copy_from(&nlp.cost_gradient_param_jacobian(z, p)?);

    let lu = kkt.clone().lu();
    let diag = lu.u().diagonal();
    let umax = diag.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let umin = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(umin > SINGULAR_RTOL * umax) {
        return Err(SensitivityError::Degenerate(diagnose(&jg.to_dense(), &ja.to_dense())));
    }
    Ok(SensitivitySystem {
        n_z: n,
        n_eq: m,
        active: set.active,
        kkt,
        param_jacobian,
        lu,
    })
}

/// Singular KKT matrix: blame LICQ if the stacked constraint Jacobian is
/// rank deficient, SOSC otherwise.
fn diagnose(jg: &DMatrix<f64>, ja: &DMatrix<f64>) -> Assumption {
    let rows = jg.nrows() + ja.nrows();
    if rows == 0 {
        return Assumption::Sosc;
    }
    let mut stacked = DMatrix::zeros(rows, jg.ncols().max(ja.ncols()));
    stacked.view_mut((0, 0), jg.shape()).copy_from(jg);
    stacked.view_mut((jg.nrows(), 0), ja.shape()).copy_from(ja);
    let sv = SVD::new(stacked, false, false).singular_values;
    let smax = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    let rank = sv.iter().filter(|&&v| v > 1e-10 * smax.max(1.0)).count();
    if rank < rows {
        Assumption::Licq
    } else {
        Assumption::Sosc
    }
}
