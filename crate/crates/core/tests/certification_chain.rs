//! Cross-module integration: the full data pipeline from the reference
//! flow through pulled-back fields, switching-time gradients, second
//! variations and the per-switch invertibility certificates, on an exact
//! three-dimensional extremal with a generic (branch-splitting) double
//! switch.

use bbcert::exprlang::{parse_expr, VectorFieldSpec};
use bbcert::flows::{ReferenceExtremal, ReferenceFlow, SwitchingSchedule};
use bbcert::geometry::ControlAffineProblem;
use bbcert::ode::OdeOptions;
use bbcert::plinv::{flow_invertibility_check, InvertibilityOptions, TriState};
use bbcert::secondvar::{coercivity_check, subspace_chain, BoundaryPenalty, FPVariation};
use nalgebra::DVector;

fn skew_tent() -> (ControlAffineProblem, ReferenceExtremal) {
    let n = 3;
    let p = ControlAffineProblem {
        n,
        m: 2,
        drift: VectorFieldSpec::parse(n, &["1", "0", "0"]).unwrap(),
        controlled: vec![
            VectorFieldSpec::parse(n, &["x3", "x1-0.5", "0"]).unwrap(),
            VectorFieldSpec::parse(n, &["0", "2*(x1-0.5)", "0"]).unwrap(),
        ],
        cost_initial: parse_expr("x2 + 10.0*0.5*(x1^2 + x2^2 + x3^2)", n).unwrap(),
        cost_final: parse_expr("-x2 + 10.0*0.5*((x1-1.0)^2 + (x2-0.75)^2 + x3^2)", n).unwrap(),
        manifold_initial: vec![],
        manifold_final: vec![],
        horizon: 1.0,
    };
    let ex = ReferenceExtremal {
        x0: DVector::zeros(3),
        lambda0: DVector::from_vec(vec![0.0, 1.0, 0.0]),
        p0: 1,
        schedule: SwitchingSchedule {
            theta0: vec![],
            tau: 0.5,
            theta1: vec![],
            arc_controls: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
        },
    };
    (p, ex)
}

#[test]
fn full_chain_certifies_the_skew_tent() {
    let (p, ex) = skew_tent();
    let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
    let pulled = rf.pull_back_fields().unwrap();
    let grads = rf.switching_time_gradients(&pulled).unwrap();
    let pen = BoundaryPenalty::new(&rf, None, None).unwrap();

    // Both branch forms coincide with their Hamiltonian constructions and
    // are coercive on their kernels.
    let fp = FPVariation::assemble(&rf, &pulled, &pen).unwrap();
    for nu in 0..2 {
        let gap = (&fp.q[nu] - &fp.q_hamiltonian[nu]).amax();
        assert!(gap <= 1e-8 * fp.q[nu].amax().max(1.0), "assembly gap {gap}");
        let out = coercivity_check(&fp.q[nu], &fp.kernel_n[nu], 1e-6);
        assert!(out.pass, "branch {} not coercive: {out:?}", nu + 1);
    }

    // The chain decomposition verifies its closed forms on both branches.
    for nu in 1..=2usize {
        let steps = subspace_chain(&rf, &pulled, &grads, &pen, nu).unwrap();
        assert_eq!(steps.len(), 1);
        assert!(steps[0].pass, "{:?}", steps[0]);
    }

    // The generic double switch is certified through the degree route, and
    // the maximized flow stays consistent with the reference.
    let report =
        flow_invertibility_check(&rf, &pulled, &grads, &pen, &InvertibilityOptions::default())
            .unwrap();
    assert_eq!(report.aggregate, TriState::Certified, "{report:?}");
    assert!(report.switches[0].route.contains("degree"));

    let l0 = ex.lambda0_point();
    for t in [0.25, 0.5, 0.75, 1.0] {
        let (hl, _) = rf.maximized_flow(&l0, t).unwrap();
        let r = rf.reference_at(t).unwrap();
        assert!((hl.x - &r.x).norm() < 1e-9);
        assert!((hl.p - &r.p).norm() < 1e-9);
    }
}

#[test]
fn diagonal_paths_collapse_the_double_switch_interval() {
    // |theta_10 - theta_{0,J0+1}| -> 0 as tau_1 - tau_2 -> 0 along a
    // sampled path toward the reference covector.
    let (p, ex) = skew_tent();
    let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
    let dl = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, 0.2, -0.4]);
    let mut prev_gap = f64::INFINITY;
    for k in 1..=4 {
        let s = 1e-2 * 0.25f64.powi(k);
        let l = bbcert::geometry::CotangentPoint::new(
            &ex.lambda0 + s * dl.rows(0, 3).into_owned(),
            &ex.x0 + s * dl.rows(3, 3).into_owned(),
        )
        .unwrap();
        let st = rf.resolve_switch_times(&l).unwrap();
        let tau_gap = (st.tau[0] - st.tau[1]).abs();
        let theta_gap = st.theta10 - st.theta_0_last;
        assert!(theta_gap >= -1e-12);
        assert!(theta_gap <= prev_gap + 1e-12, "interval did not shrink");
        // The interval is controlled by the tau separation.
        assert!(theta_gap <= 10.0 * tau_gap + 1e-10);
        prev_gap = theta_gap;
    }
}
