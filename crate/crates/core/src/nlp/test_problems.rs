//! Small problems with known solutions, shared by solver and sensitivity tests.

use nalgebra::{DMatrix, DVector};

use super::{EvalError, ParametricNlp, SparseMatrix};

/// `min ½ zᵀQz + (c + P p)ᵀz  s.t.  A z = b,  G z <= r`
#[derive(Clone, Debug)]
pub struct DenseQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub pmat: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub r: DVector<f64>,
}

fn sparse(m: &DMatrix<f64>) -> SparseMatrix {
    let mut t = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if m[(i, j)] != 0.0 {
                t.push((i, j, m[(i, j)]));
            }
        }
    }
    SparseMatrix::from_triplets(m.nrows(), m.ncols(), t)
}

impl DenseQp {
    /// `min (z - p)²`
    pub fn shift() -> Self {
        Self {
            q: DMatrix::from_element(1, 1, 2.0),
            c: DVector::zeros(1),
            pmat: DMatrix::from_element(1, 1, -2.0),
            a: DMatrix::zeros(0, 1),
            b: DVector::zeros(0),
            g: DMatrix::zeros(0, 1),
            r: DVector::zeros(0),
        }
    }

    /// `min z²  s.t.  z >= 1`
    pub fn bounded_square() -> Self {
        Self {
            q: DMatrix::from_element(1, 1, 2.0),
            c: DVector::zeros(1),
            pmat: DMatrix::zeros(1, 0),
            a: DMatrix::zeros(0, 1),
            b: DVector::zeros(0),
            g: DMatrix::from_element(1, 1, -1.0),
            r: DVector::from_element(1, -1.0),
        }
    }

    fn obj_grad(&self, z: &[f64], p: &[f64]) -> DVector<f64> {
        let z = DVector::from_column_slice(z);
        let p = DVector::from_column_slice(p);
        &self.q * z + &self.c + &self.pmat * p
    }
}

impl ParametricNlp for DenseQp {
    fn n_z(&self) -> usize {
        self.q.nrows()
    }
    fn n_p(&self) -> usize {
        self.pmat.ncols()
    }
    fn n_eq(&self) -> usize {
        self.a.nrows()
    }
    fn n_ineq(&self) -> usize {
        self.g.nrows()
    }
    fn cost(&self, z: &[f64], p: &[f64]) -> Result<f64, EvalError> {
        let zv = DVector::from_column_slice(z);
        let pv = DVector::from_column_slice(p);
        Ok(0.5 * zv.dot(&(&self.q * &zv)) + (&self.c + &self.pmat * pv).dot(&zv))
    }
    fn cost_gradient(&self, z: &[f64], p: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.obj_grad(z, p).as_slice().to_vec())
    }
    fn add_cost_hessian(&self, _z: &[f64], _p: &[f64], out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        *out += &self.q;
        Ok(())
    }
    fn cost_gradient_param_jacobian(&self, _z: &[f64], _p: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        Ok(self.pmat.clone())
    }
    fn eq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok((&self.a * DVector::from_column_slice(z) - &self.b).as_slice().to_vec())
    }
    fn eq_jacobian(&self, _z: &[f64]) -> Result<SparseMatrix, EvalError> {
        Ok(sparse(&self.a))
    }
    fn add_eq_hessian(&self, _z: &[f64], _l: &[f64], _out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        Ok(())
    }
    fn ineq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok((&self.g * DVector::from_column_slice(z) - &self.r).as_slice().to_vec())
    }
    fn ineq_jacobian(&self, _z: &[f64]) -> Result<SparseMatrix, EvalError> {
        Ok(sparse(&self.g))
    }
    fn add_ineq_hessian(&self, _z: &[f64], _m: &[f64], _out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        Ok(())
    }
}

/// Project `p` onto the unit circle, with an optional cap `z0 <= cap`:
/// `min |z - p|²  s.t.  |z|² = 1,  z0 <= cap`.
#[derive(Clone, Debug)]
pub struct CircleProjection {
    pub cap: f64,
}

impl ParametricNlp for CircleProjection {
    fn n_z(&self) -> usize {
        2
    }
    fn n_p(&self) -> usize {
        2
    }
    fn n_eq(&self) -> usize {
        1
    }
    fn n_ineq(&self) -> usize {
        1
    }
    fn cost(&self, z: &[f64], p: &[f64]) -> Result<f64, EvalError> {
        Ok((z[0] - p[0]).powi(2) + (z[1] - p[1]).powi(2))
    }
    fn cost_gradient(&self, z: &[f64], p: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(vec![2.0 * (z[0] - p[0]), 2.0 * (z[1] - p[1])])
    }
    fn add_cost_hessian(&self, _z: &[f64], _p: &[f64], out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        out[(0, 0)] += 2.0;
        out[(1, 1)] += 2.0;
        Ok(())
    }
    fn cost_gradient_param_jacobian(&self, _z: &[f64], _p: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        Ok(DMatrix::identity(2, 2) * -2.0)
    }
    fn eq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(vec![z[0] * z[0] + z[1] * z[1] - 1.0])
    }
    fn eq_jacobian(&self, z: &[f64]) -> Result<SparseMatrix, EvalError> {
        Ok(SparseMatrix::from_triplets(1, 2, vec![(0, 0, 2.0 * z[0]), (0, 1, 2.0 * z[1])]))
    }
    fn add_eq_hessian(&self, _z: &[f64], l: &[f64], out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        out[(0, 0)] += 2.0 * l[0];
        out[(1, 1)] += 2.0 * l[0];
        Ok(())
    }
    fn ineq_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(vec![z[0] - self.cap])
    }
    fn ineq_jacobian(&self, _z: &[f64]) -> Result<SparseMatrix, EvalError> {
        Ok(SparseMatrix::from_triplets(1, 2, vec![(0, 0, 1.0)]))
    }
    fn add_ineq_hessian(&self, _z: &[f64], _m: &[f64], _out: &mut DMatrix<f64>) -> Result<(), EvalError> {
        Ok(())
    }
}

/// Random strictly convex QP in 10 variables with box constraints
/// `lo <= z <= hi` (stored as 20 inequality rows) and one equality.
pub fn random_box_qp(seed: u64) -> (DenseQp, Vec<f64>, Vec<f64>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = 10;
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = m.transpose() * &m + DMatrix::identity(n, n) * 0.5;
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let lo: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..-0.2)).collect();
    let hi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let mut g = DMatrix::zeros(2 * n, n);
    let mut r = DVector::zeros(2 * n);
    for i in 0..n {
        g[(i, i)] = 1.0;
        r[i] = hi[i];
        g[(n + i, i)] = -1.0;
        r[n + i] = -lo[i];
    }
    let a = DMatrix::from_fn(1, n, |_, j| if j % 3 == 0 { 1.0 } else { 0.0 });
    let b = DVector::from_element(1, 0.1);
    let qp = DenseQp {
        q,
        c,
        pmat: DMatrix::identity(n, n),
        a,
        b,
        g,
        r,
    };
    (qp, lo, hi)
}
