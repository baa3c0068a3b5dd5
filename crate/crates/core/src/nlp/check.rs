//! Finite-difference checks of user-supplied derivatives.

use nalgebra::DMatrix;

use super::{lagrangian_gradient, EvalError, ParametricNlp};

/// Largest scaled discrepancy per derivative block,
/// `|analytic - fd| / max(1, |fd|)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DerivativeReport {
    pub cost_gradient: f64,
    pub eq_jacobian: f64,
    pub ineq_jacobian: f64,
    pub lagrangian_hessian: f64,
    pub param_jacobian: f64,
}

impl DerivativeReport {
    pub fn max(&self) -> f64 {
        [
            self.cost_gradient,
            self.eq_jacobian,
            self.ineq_jacobian,
            self.lagrangian_hessian,
            self.param_jacobian,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max() <= rel_tol
    }
}

fn scaled_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / fd.abs().max(1.0)
}

fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Central differences of every derivative at `(z, p)`, using multipliers
/// `lambda` and `mu` for the Lagrangian Hessian.
pub fn check_derivatives<N: ParametricNlp + ?Sized>(
    nlp: &N,
    z: &[f64],
    p: &[f64],
    lambda: &[f64],
    mu: &[f64],
) -> Result<DerivativeReport, EvalError> {
    let n = nlp.n_z();
    let mut rep = DerivativeReport::default();

    let grad = nlp.cost_gradient(z, p)?;
    let jg = nlp.eq_jacobian(z)?.to_dense();
    let jh = nlp.ineq_jacobian(z)?.to_dense();
    let hess = nlp.lagrangian_hessian(z, p, lambda, mu)?;

    let mut zp = z.to_vec();
    for j in 0..n {
        let hj = step(z[j]);
        zp[j] = z[j] + hj;
        let (fp, gp, ip, lp) = (
            nlp.cost(&zp, p)?,
            nlp.eq_values(&zp)?,
            nlp.ineq_values(&zp)?,
            lagrangian_gradient(nlp, p, &zp, lambda, mu)?,
        );
        zp[j] = z[j] - hj;
        let (fm, gm, im, lm) = (
            nlp.cost(&zp, p)?,
            nlp.eq_values(&zp)?,
            nlp.ineq_values(&zp)?,
            lagrangian_gradient(nlp, p, &zp, lambda, mu)?,
        );
        zp[j] = z[j];
        let inv = 0.5 / hj;
        rep.cost_gradient = rep.cost_gradient.max(scaled_err(grad[j], (fp - fm) * inv));
        for r in 0..gp.len() {
            rep.eq_jacobian = rep.eq_jacobian.max(scaled_err(jg[(r, j)], (gp[r] - gm[r]) * inv));
        }
        for r in 0..ip.len() {
            rep.ineq_jacobian = rep
                .ineq_jacobian
                .max(scaled_err(jh[(r, j)], (ip[r] - im[r]) * inv));
        }
        for i in 0..n {
            rep.lagrangian_hessian = rep
                .lagrangian_hessian
                .max(scaled_err(hess[(i, j)], (lp[i] - lm[i]) * inv));
        }
    }

    let jp: DMatrix<f64> = nlp.cost_gradient_param_jacobian(z, p)?;
    let mut pp = p.to_vec();
    for k in 0..p.len() {
        let hk = step(p[k]);
        pp[k] = p[k] + hk;
        let gp = nlp.cost_gradient(z, &pp)?;
        pp[k] = p[k] - hk;
        let gm = nlp.cost_gradient(z, &pp)?;
        pp[k] = p[k];
        for i in 0..n {
            rep.param_jacobian = rep
                .param_jacobian
                .max(scaled_err(jp[(i, k)], (gp[i] - gm[i]) * 0.5 / hk));
        }
    }
    Ok(rep)
}
