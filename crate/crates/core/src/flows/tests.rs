use super::*;
use crate::geometry::CotangentPoint;
use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};

fn opts() -> OdeOptions {
    OdeOptions::default()
}

fn problem(
    n: usize,
    m: usize,
    drift: &[&str],
    controlled: &[&[&str]],
    horizon: f64,
) -> ControlAffineProblem {
    ControlAffineProblem {
        n,
        m,
        drift: VectorFieldSpec::parse(n, drift).unwrap(),
        controlled: controlled
            .iter()
            .map(|c| VectorFieldSpec::parse(n, c).unwrap())
            .collect(),
        cost_initial: crate::exprlang::parse_expr("0", n).unwrap(),
        cost_final: crate::exprlang::parse_expr("0", n).unwrap(),
        manifold_initial: vec![],
        manifold_final: vec![],
        horizon,
    }
}

fn schedule_two_controls() -> SwitchingSchedule {
    SwitchingSchedule {
        theta0: vec![],
        tau: 0.5,
        theta1: vec![],
        arc_controls: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
    }
}

/// Matrix exponential by scaling and squaring with a Taylor core; the
/// independent oracle for linear-dynamics transition matrices.
fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.amax();
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let b = a / 2f64.powi(s);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..25 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    let mut out = sum;
    for _ in 0..s {
        out = &out * &out;
    }
    out
}

#[test]
fn constant_fields_piecewise_linear_reference() {
    let p = problem(2, 2, &["1", "0"], &[&["0", "1"], &["1", "1"]], 1.0);
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![0.0, 0.0]),
        lambda0: DVector::from_vec(vec![0.3, -0.7]),
        p0: 1,
        schedule: schedule_two_controls(),
    };
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();

    // Arc 1 field: (1,0) - (0,1) - (1,1) = (0,-2).
    let r = rf.reference_at(0.25).unwrap();
    assert_relative_eq!(r.x[0], 0.0, epsilon = 1e-10);
    assert_relative_eq!(r.x[1], -0.5, epsilon = 1e-10);
    assert_relative_eq!((r.transition - DMatrix::<f64>::identity(2, 2)).norm(), 0.0, epsilon = 1e-10);
    // Constant fields leave the adjoint untouched.
    assert_relative_eq!((&r.p - &ex.lambda0).norm(), 0.0, epsilon = 1e-12);

    // t = 0 is the identity.
    let r0 = rf.reference_at(0.0).unwrap();
    assert_eq!(r0.x, ex.x0);
    assert_eq!(r0.transition, DMatrix::identity(2, 2));

    // Arc 2 field: (1,0) + (0,1) + (1,1) = (2,2).
    let r = rf.reference_at(1.0).unwrap();
    assert_relative_eq!(r.x[0], 0.0 + 0.5 * 2.0, epsilon = 1e-10);
    assert_relative_eq!(r.x[1], -1.0 + 0.5 * 2.0, epsilon = 1e-10);
}

#[test]
fn linear_field_transition_matches_matrix_exponential() {
    // Pure drift (x2, -x1); zero controlled fields.
    let p = problem(2, 2, &["x2", "-x1"], &[&["0", "0"], &["0", "0"]], 1.0);
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![1.0, 0.0]),
        lambda0: DVector::from_vec(vec![1.0, 0.0]),
        p0: 1,
        schedule: schedule_two_controls(),
    };
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    for t in [0.3, 0.5, 0.8, 1.0] {
        let r = rf.reference_at(t).unwrap();
        let oracle = expm(&(&a * t));
        assert!(
            (&r.transition - &oracle).norm() < 1e-9,
            "transition mismatch at t={t}: {}",
            (&r.transition - &oracle).norm()
        );
    }
}

#[test]
fn adjoint_closed_form_on_diagonal_linear_field() {
    let p = problem(2, 2, &["x1", "-x2"], &[&["0", "0"], &["0", "0"]], 1.0);
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![1.0, 1.0]),
        lambda0: DVector::from_vec(vec![1.0, 1.0]),
        p0: 1,
        schedule: schedule_two_controls(),
    };
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    for t in [0.2, 0.5, 0.9] {
        let l = rf.lambda_at(t).unwrap();
        assert_relative_eq!(l.p[0], (-t).exp(), epsilon = 1e-10);
        assert_relative_eq!(l.p[1], t.exp(), epsilon = 1e-10);
    }
}

#[test]
fn nilpotent_adjoint_stays_constant() {
    // f = (x2, 0), lambda0 = (0, 1): pdot = -(Df^T)p = -(0, p1) = 0 when
    // p1 stays 0.
    let p = problem(2, 2, &["x2", "0"], &[&["0", "0"], &["0", "0"]], 1.0);
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![0.0, 1.0]),
        lambda0: DVector::from_vec(vec![0.0, 1.0]),
        p0: 1,
        schedule: schedule_two_controls(),
    };
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let l = rf.lambda_at(1.0).unwrap();
    assert_relative_eq!(l.p[0], 0.0, epsilon = 1e-12);
    assert_relative_eq!(l.p[1], 1.0, epsilon = 1e-12);
}

#[test]
fn pull_back_of_constant_control_field_is_matrix_exponential() {
    // Drift (x2, 0) = Ax, f1 = (0, 1) constant: pulling f1 back to time 0
    // through the reference flow at tau gives e^{-tau A} (0,1).
    let p = problem(2, 2, &["x2", "0"], &[&["0", "1"], &["0", "0"]], 1.0);
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![0.0, 0.0]),
        lambda0: DVector::from_vec(vec![1.0, 1.0]),
        p0: 1,
        schedule: schedule_two_controls(),
    };
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let pulled = rf.pull_back_fields().unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let oracle = expm(&(-0.5 * &a)) * DVector::from_vec(vec![0.0, 1.0]);
    assert!((&pulled.ftilde[0].value_at_x0 - &oracle).norm() < 1e-9);

    // g_00 pulls back at theta = 0, so it equals the first arc field.
    let k00 = rf.arc_spec(0).eval(&ex.x0).unwrap();
    assert!((&pulled.g_at(0, 0).value_at_x0 - &k00).norm() < 1e-12);

    // Constant-field pull-back identities h_nu = g_0J0 + 2 f~_nu at x0.
    for nu in 0..2 {
        let lhs = &pulled.h[nu].value_at_x0;
        let rhs = &pulled.g_at(0, 0).value_at_x0 + 2.0 * &pulled.ftilde[nu].value_at_x0;
        assert!((lhs - rhs).norm() < 1e-9);
    }
}

/// The analytic double-switch testbed: x1 tracks time, both switching
/// functions are exact affine functions of time and vanish at tau = 0.5.
fn tent_problem() -> (ControlAffineProblem, ReferenceExtremal) {
    let p = problem(
        2,
        2,
        &["1", "0"],
        &[&["0", "x1-0.5"], &["0", "2*(x1-0.5)"]],
        1.0,
    );
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![0.0, 0.0]),
        lambda0: DVector::from_vec(vec![0.0, 1.0]),
        p0: 1,
        schedule: schedule_two_controls(),
    };
    (p, ex)
}

/// Tent with one extra control switching simply at 0.3 and 0.7:
/// sigma_3(t) = -(t - 0.3)(t - 0.7).
fn tent3_problem() -> (ControlAffineProblem, ReferenceExtremal) {
    let p = problem(
        2,
        3,
        &["1", "0"],
        &[
            &["0", "x1-0.5"],
            &["0", "2*(x1-0.5)"],
            &["0", "-(x1-0.3)*(x1-0.7)"],
        ],
        1.0,
    );
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![0.0, 0.0]),
        lambda0: DVector::from_vec(vec![0.0, 1.0]),
        p0: 1,
        schedule: SwitchingSchedule {
            theta0: vec![0.3],
            tau: 0.5,
            theta1: vec![0.7],
            arc_controls: vec![
                vec![-1.0, -1.0, -1.0],
                vec![-1.0, -1.0, 1.0],
                vec![1.0, 1.0, 1.0],
                vec![1.0, 1.0, -1.0],
            ],
        },
    };
    (p, ex)
}

#[test]
fn tent_switching_functions_are_affine() {
    let (p, ex) = tent_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let sf = rf.switching_functions(101).unwrap();
    for (k, &t) in sf.grid.iter().enumerate() {
        assert_relative_eq!(sf.values[0][k], t - 0.5, epsilon = 1e-9);
        assert_relative_eq!(sf.values[1][k], 2.0 * (t - 0.5), epsilon = 1e-9);
    }
    assert_relative_eq!(sf.double_value[0], 0.0, epsilon = 1e-10);
    assert_relative_eq!(sf.double_value[1], 0.0, epsilon = 1e-10);
    assert_relative_eq!(sf.double_deriv_left[0], 1.0, epsilon = 1e-6);
    assert_relative_eq!(sf.double_deriv_right[0], 1.0, epsilon = 1e-6);
    assert_relative_eq!(sf.double_deriv_left[1], 2.0, epsilon = 1e-6);
    assert_relative_eq!(sf.double_deriv_right[1], 2.0, epsilon = 1e-6);
}

#[test]
fn constructed_affine_switching_function_from_moving_covector() {
    // lambda(t) = (1, t - 0.5), f2 = (0, 1): sigma_2(t) = t - 0.5 with
    // derivative 1 at tau.
    let p = problem(2, 2, &["-x2", "0"], &[&["0", "1"], &["0", "1"]], 1.0);
    let ex = ReferenceExtremal {
        x0: DVector::from_vec(vec![0.0, 0.0]),
        lambda0: DVector::from_vec(vec![1.0, -0.5]),
        p0: 1,
        schedule: schedule_two_controls(),
    };
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let sf = rf.switching_functions(51).unwrap();
    for (k, &t) in sf.grid.iter().enumerate() {
        assert_relative_eq!(sf.values[1][k], t - 0.5, epsilon = 1e-9);
    }
    assert_relative_eq!(sf.double_deriv_left[1], 1.0, epsilon = 1e-6);
    assert_relative_eq!(sf.double_deriv_right[1], 1.0, epsilon = 1e-6);
}

#[test]
fn maximized_flow_reproduces_reference_at_lambda0() {
    let (p, ex) = tent_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let l0 = ex.lambda0_point();
    for t in [0.0, 0.1, 0.5, 0.7, 1.0] {
        let (hl, state) = rf.maximized_flow(&l0, t).unwrap();
        let r = rf.reference_at(t).unwrap();
        assert!((hl.x - &r.x).norm() < 1e-9, "state mismatch at t={t}");
        assert!((hl.p - &r.p).norm() < 1e-9, "covector mismatch at t={t}");
        assert_relative_eq!(state.tau[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(state.tau[1], 0.5, epsilon = 1e-10);
    }
}

#[test]
fn tent3_maximized_flow_reproduces_reference() {
    let (p, ex) = tent3_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let l0 = ex.lambda0_point();
    for t in [0.2, 0.4, 0.6, 0.9] {
        let (hl, state) = rf.maximized_flow(&l0, t).unwrap();
        let r = rf.reference_at(t).unwrap();
        assert!((hl.x - &r.x).norm() < 1e-9);
        assert!((hl.p - &r.p).norm() < 1e-9);
        assert_relative_eq!(state.theta0[0], 0.3, epsilon = 1e-10);
        assert_relative_eq!(state.theta1[0], 0.7, epsilon = 1e-10);
    }
}

#[test]
fn newton_matches_closed_form_switching_times() {
    // On the tent, tau_nu(l) = 0.5 - x1(0) in closed form, independent of
    // the covector part (p2 only scales the switching function).
    let (p, ex) = tent_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let l = CotangentPoint::new(
        DVector::from_vec(vec![0.1, 1.02]),
        DVector::from_vec(vec![0.03, -0.2]),
    )
    .unwrap();
    let s = rf.resolve_switch_times(&l).unwrap();
    assert_relative_eq!(s.tau[0], 0.47, epsilon = 1e-10);
    assert_relative_eq!(s.tau[1], 0.47, epsilon = 1e-10);
    // tau_1 = tau_2 forces theta_10 = theta_{0,J0+1} (continuity at the
    // diagonal); the branch flag itself is tie-broken on root-solve noise
    // there and either branch gives the same flow.
    assert_relative_eq!(s.theta10, s.theta_0_last, epsilon = 1e-10);
}

#[test]
fn ordering_chain_holds_on_sampled_ball() {
    let (p, ex) = tent3_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let r = rf.probe_validity_radius(0.05, 20, 42).unwrap();
    assert!(r > 1e-6, "validity radius collapsed: {r}");
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let mut dl = DVector::zeros(4);
        for i in 0..4 {
            dl[i] = rng.gen_range(-1.0..1.0);
        }
        dl *= r / dl.norm();
        let l = CotangentPoint::new(
            &ex.lambda0 + dl.rows(0, 2).into_owned(),
            &ex.x0 + dl.rows(2, 2).into_owned(),
        )
        .unwrap();
        let s = rf.resolve_switch_times(&l).unwrap();
        assert!(s.theta0[0] < s.theta_0_last);
        assert!(s.theta_0_last <= s.theta10 + 1e-12);
        assert!(s.theta10 < s.theta1[0]);
    }
}

#[test]
fn gradients_match_finite_differences_of_root_solves() {
    let (p, ex) = tent3_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let pulled = rf.pull_back_fields().unwrap();
    let grads = rf.switching_time_gradients(&pulled).unwrap();

    let h = 1e-6;
    let fd = |coord: usize, pick: &dyn Fn(&MaximizedFlowState) -> f64| -> f64 {
        let mut lp = ex.lambda0_point();
        let mut lm = ex.lambda0_point();
        if coord < 2 {
            lp.p[coord] += h;
            lm.p[coord] -= h;
        } else {
            lp.x[coord - 2] += h;
            lm.x[coord - 2] -= h;
        }
        let sp = rf.resolve_switch_times(&lp).unwrap();
        let sm = rf.resolve_switch_times(&lm).unwrap();
        (pick(&sp) - pick(&sm)) / (2.0 * h)
    };

    for coord in 0..4 {
        let d = fd(coord, &|s| s.theta0[0]);
        assert_relative_eq!(grads.dtheta0[0][coord], d, epsilon = 1e-6, max_relative = 1e-5);
        for nu in 0..2 {
            let d = fd(coord, &|s| s.tau[nu]);
            assert_relative_eq!(grads.dtau[nu][coord], d, epsilon = 1e-6, max_relative = 1e-5);
            let d = fd(coord, &|s| s.theta10_nu[nu]);
            assert_relative_eq!(
                grads.dtheta10[nu][coord],
                d,
                epsilon = 1e-6,
                max_relative = 1e-5
            );
            let d = fd(coord, &|s| s.theta1_nu[nu][0]);
            assert_relative_eq!(
                grads.dtheta1[nu][0][coord],
                d,
                epsilon = 1e-6,
                max_relative = 1e-5
            );
        }
    }

    // The two routes to dtheta^nu_10 agree.
    assert!(grads.tautheta_residual[0] < 1e-9);
    assert!(grads.tautheta_residual[1] < 1e-9);

    // Empty-recursion base: Delta_00 is the identity.
    assert!((grads.delta0[0].clone() - DMatrix::<f64>::identity(4, 4)).norm() < 1e-15);
}

#[test]
fn legendre_bracket_agrees_between_switch_point_and_pull_back() {
    // At theta_01 = 0.3 of the three-control tent the bracket pairing is
    // 0.8 in both the switch-point and pulled-back formulations.
    let (p, ex) = tent3_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let pulled = rf.pull_back_fields().unwrap();

    let pulled_value = pulled.bracket_pairing(pulled.g_at(0, 0), pulled.g_at(0, 1));

    let lam = rf.lambda_at(0.3).unwrap();
    let direct = crate::geometry::symplectic_pairing(rf.arc_spec(0), rf.arc_spec(1), &lam).unwrap();

    assert_relative_eq!(direct, 0.8, epsilon = 1e-9);
    assert_relative_eq!(pulled_value, direct, epsilon = 1e-7, max_relative = 1e-7);
}

#[test]
fn pull_back_identities_hold_near_x0() {
    let (p, ex) = tent3_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let tau = ex.schedule.tau;
    let j0 = ex.schedule.j0();
    let k0j0 = rf.arc_spec(j0).clone();
    let k10 = rf.arc_spec(j0 + 1).clone();
    for _ in 0..20 {
        let x = DVector::from_vec(vec![rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)]);
        let g0j0 = rf.pull_back_value(tau, &k0j0, &x).unwrap();
        let g10 = rf.pull_back_value(tau, &k10, &x).unwrap();
        for nu in 1..=2usize {
            let h = rf
                .pull_back_value(tau, rf.knu_spec(nu), &x)
                .unwrap();
            let ft = rf
                .pull_back_value(tau, &rf.problem.controlled[nu - 1].clone(), &x)
                .unwrap();
            assert!((&h - (&g0j0 + 2.0 * &ft)).norm() < 1e-9);
        }
        let f1 = rf.pull_back_value(tau, &rf.problem.controlled[0].clone(), &x).unwrap();
        let f2 = rf.pull_back_value(tau, &rf.problem.controlled[1].clone(), &x).unwrap();
        assert!((&g10 - (&g0j0 + 2.0 * &f1 + 2.0 * &f2)).norm() < 1e-9);
    }
}

#[test]
fn adjoint_trace_matches_pointwise_queries() {
    let (p, ex) = tent_problem();
    let rf = ReferenceFlow::new(&p, &ex, opts()).unwrap();
    let trace = rf.adjoint_trace(11).unwrap();
    assert_eq!(trace.len(), 11);
    for (t, l) in &trace {
        let direct = rf.lambda_at(*t).unwrap();
        assert!((l.p.clone() - direct.p).norm() < 1e-12);
    }
    assert_relative_eq!(trace[0].1.p[1], 1.0, epsilon = 1e-12);
}
