use nalgebra::{DMatrix, DVector};

use super::test_problems::{random_box_qp, CircleProjection, DenseQp};
use super::*;

fn solve(nlp: &dyn ParametricNlp, p: &[f64], z0: &[f64]) -> KktPoint {
    InteriorPoint::default().solve(nlp, p, z0).expect("solve")
}

#[test]
fn unconstrained_shift() {
    let nlp = DenseQp::shift();
    let sol = solve(&nlp, &[3.0], &[0.0]);
    assert!(sol.converged());
    assert!((sol.z[0] - 3.0).abs() < 1e-10);
}

#[test]
fn bound_active_with_multiplier_two() {
    let nlp = DenseQp::bounded_square();
    let sol = solve(&nlp, &[], &[5.0]);
    assert!(sol.converged(), "{:?}", sol.residuals);
    assert!((sol.z[0] - 1.0).abs() < 1e-8);
    assert!((sol.mu[0] - 2.0).abs() < 1e-6);
    let set = active_set(&sol, TOL_ACT);
    assert_eq!(set.active, vec![0]);
    assert!(!set.has_weak());
}

#[test]
fn circle_projection_nonlinear_equality() {
    let nlp = CircleProjection { cap: 2.0 };
    let p = [0.3, 1.7];
    let sol = solve(&nlp, &p, &[1.0, 0.0]);
    assert!(sol.converged());
    let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
    assert!((sol.z[0] - p[0] / norm).abs() < 1e-8);
    assert!((sol.z[1] - p[1] / norm).abs() < 1e-8);
}

#[test]
fn circle_projection_with_active_cap() {
    let nlp = CircleProjection { cap: 0.8 };
    let sol = solve(&nlp, &[2.0, 0.5], &[0.0, 1.0]);
    assert!(sol.converged());
    assert!((sol.z[0] - 0.8).abs() < 1e-8);
    assert!((sol.z[1] - 0.6).abs() < 1e-8);
    assert!(sol.mu[0] > 1e-3);
}

#[test]
fn infeasible_problem_is_reported() {
    // z >= 1 and z <= -1
    let mut nlp = DenseQp::bounded_square();
    nlp.g = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
    nlp.r = DVector::from_vec(vec![-1.0, -1.0]);
    let sol = solve(&nlp, &[], &[0.0]);
    assert!(!sol.converged());
    assert!(sol.residuals.feasibility > 1e-3);
}

#[test]
fn rejects_bad_initial_guess() {
    let nlp = DenseQp::shift();
    let ip = InteriorPoint::default();
    assert!(matches!(ip.solve(&nlp, &[0.0], &[]), Err(SolveError::Dimension { .. })));
    assert!(matches!(ip.solve(&nlp, &[0.0], &[f64::NAN]), Err(SolveError::NonFinite)));
}

/// Inactive rows keep multipliers of order `barrier / slack`, so matching an
/// oracle to 1e-7 needs a smaller final barrier than the default.
fn tight() -> InteriorPoint {
    InteriorPoint::new(SolverOptions {
        tol: 1e-11,
        mu_final: 1e-13,
        ..Default::default()
    })
}

/// Solve the equality-constrained QP obtained by fixing the given
/// inequality rows as equalities. Returns `(z, λ, μ_active)`.
fn solve_with_active(qp: &DenseQp, p: &[f64], active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.q.nrows();
    let me = qp.a.nrows();
    let k = me + active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.q);
    let lin = &qp.c + &qp.pmat * DVector::from_column_slice(p);
    rhs.rows_mut(0, n).copy_from(&(-lin));
    for r in 0..me {
        for j in 0..n {
            kkt[(n + r, j)] = qp.a[(r, j)];
            kkt[(j, n + r)] = qp.a[(r, j)];
        }
        rhs[n + r] = qp.b[r];
    }
    for (t, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + me + t, j)] = qp.g[(i, j)];
            kkt[(j, n + me + t)] = qp.g[(i, j)];
        }
        rhs[n + me + t] = qp.r[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

/// Exhaustive active-set enumeration for box-constrained QPs: each
/// variable is free, at its upper or at its lower bound.
fn enumerate_box_qp(qp: &DenseQp, p: &[f64]) -> DVector<f64> {
    let n = qp.q.nrows();
    let me = qp.a.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let mut active = Vec::new();
        for i in 0..n {
            match c % 3 {
                1 => active.push(i),
                2 => active.push(n + i),
                _ => {}
            }
            c /= 3;
        }
        let Some((z, mult)) = solve_with_active(qp, p, &active) else {
            continue;
        };
        let feasible = (&qp.g * &z - &qp.r).iter().all(|&v| v <= 1e-9);
        let dual_ok = mult.rows(me, active.len()).iter().all(|&v| v >= -1e-9);
        if feasible && dual_ok {
            let f = qp.cost(z.as_slice(), p).unwrap();
            if best.as_ref().map_or(true, |b| f < b.0) {
                best = Some((f, z));
            }
        }
    }
    best.expect("some active set satisfies KKT").1
}

fn shrink(qp: &DenseQp, n: usize) -> DenseQp {
    let full = qp.q.nrows();
    let mut g = DMatrix::zeros(2 * n, n);
    let mut r = DVector::zeros(2 * n);
    for i in 0..n {
        g[(i, i)] = 1.0;
        r[i] = qp.r[i];
        g[(n + i, i)] = -1.0;
        r[n + i] = qp.r[full + i];
    }
    DenseQp {
        q: qp.q.view((0, 0), (n, n)).into_owned(),
        c: qp.c.rows(0, n).into_owned(),
        pmat: DMatrix::identity(n, n),
        a: qp.a.view((0, 0), (1, n)).into_owned(),
        b: qp.b.clone(),
        g,
        r,
    }
}

#[test]
fn box_qp_matches_active_set_enumeration() {
    for seed in 0..4 {
        let (full, _, _) = random_box_qp(seed);
        let qp = shrink(&full, 6);
        let p = vec![0.7, -1.3, 2.0, 0.1, -0.4, 1.1];
        let oracle = enumerate_box_qp(&qp, &p);
        let sol = tight().solve(&qp, &p, &vec![0.0; 6]).unwrap();
        assert!(sol.converged(), "seed {seed}: {:?}", sol.residuals);
        for i in 0..6 {
            assert!((sol.z[i] - oracle[i]).abs() < 1e-7, "seed {seed} z[{i}]");
        }
    }
}

#[test]
fn ten_variable_box_qp_satisfies_kkt_certificate() {
    let (qp, lo, hi) = random_box_qp(11);
    let p = vec![0.5; 10];
    let sol = tight().solve(&qp, &p, &vec![0.0; 10]).unwrap();
    assert!(sol.converged());
    let active: Vec<usize> = active_set(&sol, TOL_ACT).active;
    let (z, mult) = solve_with_active(&qp, &p, &active).unwrap();
    assert!(mult.rows(1, active.len()).iter().all(|&v| v > -1e-9));
    for i in 0..10 {
        assert!(z[i] >= lo[i] - 1e-9 && z[i] <= hi[i] + 1e-9);
        assert!((sol.z[i] - z[i]).abs() < 1e-7);
    }
}

#[test]
fn residuals_grow_under_perturbation() {
    let nlp = CircleProjection { cap: 0.8 };
    let p = [2.0, 0.5];
    let sol = solve(&nlp, &p, &[0.0, 1.0]);
    let base = point_residuals(&nlp, &p, &sol).unwrap();
    assert!(base.within(TOL_KKT));
    let mut z = sol.z.clone();
    z[1] += 1e-4;
    let r = kkt_residuals(&nlp, &p, &z, &sol.lambda, &sol.mu).unwrap();
    assert!(r.stationarity > 1e-5 && r.feasibility > 1e-5);
    let mu = vec![sol.mu[0] + 1e-3];
    let r = kkt_residuals(&nlp, &p, &sol.z, &sol.lambda, &mu).unwrap();
    assert!(r.stationarity > 1e-4);
}

#[test]
fn weak_activity_detected() {
    // minimiser of (z - 1)² sits exactly on z <= 1 with zero multiplier
    let mut nlp = DenseQp::shift();
    nlp.g = DMatrix::from_element(1, 1, 1.0);
    nlp.r = DVector::from_element(1, 1.0);
    let sol = solve(&nlp, &[1.0], &[0.0]);
    let set = active_set(&sol, TOL_ACT);
    assert_eq!(set.weak, vec![0], "{:?} {:?}", sol.ineq, sol.mu);
}

#[test]
fn derivative_check_on_circle() {
    let nlp = CircleProjection { cap: 0.8 };
    let rep = check_derivatives(&nlp, &[0.3, -0.2], &[1.0, 2.0], &[0.7], &[0.1]).unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");
}

#[test]
fn trace_is_recorded_and_written() {
    let nlp = CircleProjection { cap: 0.8 };
    let ip = InteriorPoint::new(SolverOptions {
        trace: true,
        ..Default::default()
    });
    let sol = ip.solve(&nlp, &[2.0, 0.5], &[0.0, 1.0]).unwrap();
    assert_eq!(sol.trace.len(), sol.iterations);
    let mut buf = Vec::new();
    write_trace_csv(&sol.trace, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), sol.iterations + 1);
    assert!(text.starts_with("iter,stationarity"));
}
