use dmpc::dual::{Dual, Real};
use dmpc::nmpc::{transcribe, NmpcConfig, NmpcParams};
use dmpc::policy::{action_heads, param_heads, Head};
use dmpc::track::{build_loop_track, build_paper_track, ConstantCurvature};
use dmpc::vehicle::{rk4_step, VehicleParams, VehicleState, NU, NX};
use proptest::prelude::*;

fn cfg() -> NmpcConfig {
    NmpcConfig::new(VehicleParams::nominal(), 4.5)
}

fn test_fn<T: Real>(x: T) -> T {
    x.sin() * x + (x * 0.5).atan() / (x * x + 1.0).sqrt() - x.cos().powi2()
}

fn state_strategy() -> impl Strategy<Value = [f64; NX]> {
    (14.5f64..22.5, -0.5f64..0.5, -0.3f64..0.3, 0.0f64..100.0, -1.5f64..1.5, -0.2f64..0.2, -0.5f64..0.5)
        .prop_map(|(vx, vy, r, s, d, th, de)| [vx, vy, r, s, d, th, de])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dual_tangent_matches_central_difference(x in -4.0f64..4.0) {
        let ad = test_fn(Dual::var(x)).eps;
        let h = 1e-6;
        let fd = (test_fn(x + h) - test_fn(x - h)) / (2.0 * h);
        prop_assert!((ad - fd).abs() <= 1e-7 * (1.0 + fd.abs()), "{ad} vs {fd}");
    }

    #[test]
    fn rk4_tangents_match_finite_differences(x in state_strategy(), rate in -3.0f64..3.0, tr in 0.0f64..1.0, col in 0usize..NX + NU) {
        let p = VehicleParams::nominal();
        let k = ConstantCurvature(1.0 / 150.0);
        let u = [rate, tr];
        let seeded = |i: usize, v: f64| if i == col { Dual::var(v) } else { Dual::new(v, 0.0) };
        let xd: [Dual<f64>; NX] = std::array::from_fn(|i| seeded(i, x[i]));
        let ud: [Dual<f64>; NU] = std::array::from_fn(|i| seeded(NX + i, u[i]));
        let ad = rk4_step(&xd, &ud, 0.1, &k, &p).unwrap();
        let h = 1e-6;
        let shifted = |sign: f64| {
            let (mut xs, mut us) = (x, u);
            if col < NX { xs[col] += sign * h } else { us[col - NX] += sign * h }
            rk4_step(&xs, &us, 0.1, &k, &p).unwrap()
        };
        let (fp, fm) = (shifted(1.0), shifted(-1.0));
        for i in 0..NX {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            prop_assert!((ad[i].eps - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "d x{i} / d col {col}: {} vs {fd}", ad[i].eps);
        }
    }

    #[test]
    fn projected_params_are_valid_and_fixed(a in proptest::array::uniform6(-50.0f64..50.0)) {
        let c = cfg();
        let p = NmpcParams::from_array(&a).project(&c);
        prop_assert!(p.validate(&c).is_ok());
        prop_assert_eq!(p.project(&c), p);
    }

    #[test]
    fn wrap_lands_in_one_lap(sigma in -5000.0f64..5000.0, laps in -3i32..3) {
        let t = build_paper_track();
        let l = t.total_length();
        let w = t.wrap(sigma);
        prop_assert!((0.0..l).contains(&w));
        let shifted = t.wrap(sigma + f64::from(laps) * l);
        prop_assert!((shifted - w).abs() < 1e-9 || (l - (shifted - w).abs()) < 1e-9);
        prop_assert!((t.curvature(sigma) - t.curvature(sigma + f64::from(laps) * l)).abs() < 1e-9);
    }

    #[test]
    fn frenet_pose_repeats_every_lap(sigma in 0.0f64..400.0, d in -2.0f64..2.0) {
        let t = build_loop_track(80.0, 60.0, 4.5).unwrap();
        let l = t.total_length();
        let (x0, y0, h0) = t.frenet_to_cartesian(sigma, d);
        let (x1, y1, h1) = t.frenet_to_cartesian(sigma + l, d);
        prop_assert!((x0 - x1).abs() < 1e-6 && (y0 - y1).abs() < 1e-6);
        prop_assert!((h1 - h0 - 2.0 * std::f64::consts::PI).abs() < 1e-6);
    }

    #[test]
    fn offset_heads_invert(u in 0.001f64..0.999) {
        let c = cfg();
        for h in param_heads(&c).into_iter().chain(action_heads(&c)) {
            if let Head::Offset { lo, hi } = h {
                let y = lo + u * (hi - lo);
                prop_assert!((h.apply(h.inverse(y)) - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn packing_round_trips(x0 in state_strategy(), rates in proptest::collection::vec((-4.0f64..4.0, 0.0f64..1.0), 15)) {
        let c = cfg();
        let s = VehicleState::from_array(&x0);
        let k = ConstantCurvature(0.0);
        let problem = transcribe(&s, &c, &k).unwrap();
        let states: Vec<[f64; NX]> = (0..=c.horizon).map(|i| {
            let mut x = x0;
            x[3] += i as f64;
            x
        }).collect();
        let controls: Vec<[f64; NU]> = rates.iter().map(|&(r, t)| [r, t]).collect();
        let z = problem.pack(&states, &controls);
        let (xs, us) = problem.trajectory(&z);
        for (a, b) in xs.iter().zip(&states) {
            for (p, q) in a.to_array().iter().zip(b) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + q.abs()));
            }
        }
        for (a, b) in us.iter().zip(&controls) {
            for (p, q) in a.to_array().iter().zip(b) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }
}
