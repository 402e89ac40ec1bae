//! PMP residuals and the strong bang-bang Legendre conditions, with
//! explicit numeric margins.
//!
//! Every strict inequality is reported as a margin and every equality as a
//! residual; a check passes when the margin clears its threshold and the
//! residual stays below its own. The Legendre quantities are computed in
//! three formulations — the one-sided derivative of the switching-function
//! trace, the bracket pairing at the switch point, and the pulled-back
//! bracket pairing at `x̂_0` — and any disagreement beyond tolerance is an
//! error (it flags an integration or implementation fault, not a property
//! of the extremal).

use crate::flows::{PulledBackFields, ReferenceFlow};
use crate::geometry::{symplectic_pairing, ControlAffineProblem};
use crate::ode::OdeOptions;
use crate::{CoreError, Result};
use nalgebra::DVector;

/// Thresholds and discretization controls, all scale-covariant: strict
/// inequalities pass at `margin > margin_scale * max(1, |λ̂|_∞)`, equalities
/// at `residual < residual_scale * max(1, |λ̂|_∞)`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionThresholds {
    pub margin_scale: f64,
    pub residual_scale: f64,
    /// Exclusion window around a component's own switches, as a fraction of
    /// the horizon.
    pub gap_fraction: f64,
    /// Dense grid resolution for trace-based checks.
    pub grid_points: usize,
    /// Relative agreement tolerance between Legendre formulations.
    pub cross_tol: f64,
}

impl Default for ConditionThresholds {
    fn default() -> Self {
        ConditionThresholds {
            margin_scale: 1e-7,
            residual_scale: 1e-8,
            gap_fraction: 1e-3,
            grid_points: 601,
            cross_tol: 1e-7,
        }
    }
}

/// Outcome of one condition check.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub name: String,
    pub pass: bool,
    /// Smallest strict-inequality slack (infinite when the condition has no
    /// inequalities).
    pub margin: f64,
    /// Largest equality violation.
    pub residual: f64,
    /// Times/indices of the worst cases.
    pub locations: Vec<String>,
    /// Named diagnostic values for the certificate.
    pub values: Vec<(String, f64)>,
}

impl ConditionReport {
    fn finish(
        name: &str,
        margin: f64,
        residual: f64,
        locations: Vec<String>,
        values: Vec<(String, f64)>,
        thresholds: &ConditionThresholds,
        scale: f64,
    ) -> Self {
        let pass = margin > thresholds.margin_scale * scale
            && residual < thresholds.residual_scale * scale;
        ConditionReport {
            name: name.into(),
            pass,
            margin,
            residual,
            locations,
            values,
        }
    }
}

/// `max(1, |λ̂|_∞)` over a dense grid; used to scale every threshold.
fn lambda_scale(rf: &ReferenceFlow, grid: usize) -> Result<f64> {
    let mut s: f64 = 1.0;
    for k in 0..grid {
        let t = rf.horizon() * k as f64 / (grid - 1) as f64;
        let l = rf.lambda_at(t)?;
        s = s.max(l.p.amax());
    }
    Ok(s)
}

/// Orthonormal basis of the nullspace of a constraint Jacobian (the tangent
/// space of the manifold it cuts out). Errors if the Jacobian is rank
/// deficient.
pub fn tangent_basis(jac: &nalgebra::DMatrix<f64>, n: usize) -> Result<Vec<DVector<f64>>> {
    if jac.nrows() == 0 {
        return Ok((0..n)
            .map(|i| {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                e
            })
            .collect());
    }
    // Pad to at least square so the full right singular basis is returned.
    let m = jac.nrows().max(n);
    let mut padded = nalgebra::DMatrix::zeros(m, n);
    padded
        .view_mut((0, 0), (jac.nrows(), n))
        .copy_from(jac);
    let svd = padded.svd(false, true);
    let tol = 1e-10 * svd.singular_values.max().max(1.0);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < jac.nrows() {
        return Err(CoreError::RankDeficient(format!(
            "constraint Jacobian has rank {rank} < {} rows",
            jac.nrows()
        )));
    }
    let vt = svd.v_t.unwrap();
    Ok((rank..n).map(|i| vt.row(i).transpose()).collect())
}

/// PMP residuals: adjoint re-integration consistency, transversality at
/// both endpoints, and the pointwise maximality gap of the closed-form
/// box-control maximized Hamiltonian `H(ℓ) = F_0(ℓ) + Σ_s |F_s(ℓ)|`.
pub fn check_pmp(rf: &ReferenceFlow, thresholds: &ConditionThresholds) -> Result<ConditionReport> {
    let problem = &rf.problem;
    let ex = &rf.extremal;
    let n = problem.n;
    let scale = lambda_scale(rf, 101)?;
    let mut residual: f64 = 0.0;
    let mut locations = Vec::new();
    let mut values = Vec::new();

    // (a) Re-integration consistency at a tighter tolerance.
    let tight = OdeOptions {
        rtol: rf.opts.rtol * 0.1,
        atol: rf.opts.atol * 0.1,
        ..rf.opts
    };
    let rf_tight = ReferenceFlow::new(problem, ex, tight)?;
    let r_a = rf.reference_at(problem.horizon)?;
    let r_b = rf_tight.reference_at(problem.horizon)?;
    let reint = ((&r_a.p - &r_b.p).norm().max((&r_a.x - &r_b.x).norm())) / scale;
    values.push(("adjoint_reintegration".into(), reint));
    if reint > residual {
        residual = reint;
        locations.push("adjoint re-integration at T".into());
    }

    // (b) Transversality at both ends.
    let p0 = f64::from(ex.p0);
    let dc0 = ControlAffineProblem::gradient(&problem.cost_initial, &ex.x0)?;
    let j0 = ControlAffineProblem::constraint_jacobian(&problem.manifold_initial, &ex.x0)?;
    let basis0 = tangent_basis(&j0, n)?;
    let w0 = &ex.lambda0 - p0 * &dc0;
    for (i, v) in basis0.iter().enumerate() {
        let r = w0.dot(v).abs();
        values.push((format!("transversality_initial_{i}"), r));
        if r > residual {
            residual = r;
            locations.push(format!("transversality at t=0, tangent direction {i}"));
        }
    }
    let xf = rf.x_final();
    let lf = rf.lambda_final();
    let dcf = ControlAffineProblem::gradient(&problem.cost_final, xf)?;
    let jf = ControlAffineProblem::constraint_jacobian(&problem.manifold_final, xf)?;
    let basisf = tangent_basis(&jf, n)?;
    let wf = lf + p0 * &dcf;
    for (i, v) in basisf.iter().enumerate() {
        let r = wf.dot(v).abs();
        values.push((format!("transversality_final_{i}"), r));
        if r > residual {
            residual = r;
            locations.push(format!("transversality at t=T, tangent direction {i}"));
        }
    }

    // (c) Maximality gap on a dense grid.
    let sched = &ex.schedule;
    let mut max_gap: f64 = 0.0;
    let mut worst_t = 0.0;
    for k in 0..thresholds.grid_points {
        let t = problem.horizon * k as f64 / (thresholds.grid_points - 1) as f64;
        let r = rf.reference_at(t)?;
        let f0v = problem.drift.eval(&r.x)?;
        let mut h = r.p.dot(&f0v);
        let arc = arc_controls_at(sched, t);
        let mut fref = r.p.dot(&f0v);
        for (s, fs) in problem.controlled.iter().enumerate() {
            let sig = r.p.dot(&fs.eval(&r.x)?);
            h += sig.abs();
            fref += arc[s] * sig;
        }
        let gap = h - fref;
        if gap > max_gap {
            max_gap = gap;
            worst_t = t;
        }
    }
    values.push(("maximality_gap".into(), max_gap));
    if max_gap > residual {
        residual = max_gap;
        locations.push(format!("maximality gap at t={worst_t}"));
    }

    Ok(ConditionReport::finish(
        "pmp",
        f64::INFINITY,
        residual,
        locations,
        values,
        thresholds,
        scale,
    ))
}

fn arc_controls_at(sched: &crate::flows::SwitchingSchedule, t: f64) -> &[f64] {
    let mut idx = 0;
    let mut bounds = Vec::with_capacity(sched.num_arcs());
    bounds.extend_from_slice(&sched.theta0);
    bounds.push(sched.tau);
    bounds.extend_from_slice(&sched.theta1);
    for b in bounds {
        if t > b {
            idx += 1;
        }
    }
    &sched.arc_controls[idx]
}

/// Times at which control component `s` (0-based) flips.
fn switch_times_of_component(sched: &crate::flows::SwitchingSchedule, s: usize) -> Vec<f64> {
    let mut times = Vec::new();
    for j in 1..=sched.j0() {
        if sched.switch_component(0, j).ok() == Some(s) {
            times.push(sched.theta0[j - 1]);
        }
    }
    if s < 2 {
        times.push(sched.tau);
    }
    for j in 1..=sched.j1() {
        if sched.switch_component(1, j).ok() == Some(s) {
            times.push(sched.theta1[j - 1]);
        }
    }
    times
}

/// Assumption 1: off its own switches, `û_s(t) σ_s(t) > 0`; at its switches
/// `σ_s` vanishes.
pub fn check_regularity(
    rf: &ReferenceFlow,
    thresholds: &ConditionThresholds,
) -> Result<ConditionReport> {
    let problem = &rf.problem;
    let sched = &rf.extremal.schedule;
    let scale = lambda_scale(rf, 101)?;
    let gap = thresholds.gap_fraction * problem.horizon;

    let mut margin = f64::INFINITY;
    let mut residual: f64 = 0.0;
    let mut locations = Vec::new();
    let mut values = Vec::new();

    for k in 0..thresholds.grid_points {
        let t = problem.horizon * k as f64 / (thresholds.grid_points - 1) as f64;
        let r = rf.reference_at(t)?;
        let arc = arc_controls_at(sched, t);
        for (s, fs) in problem.controlled.iter().enumerate() {
            let own = switch_times_of_component(sched, s);
            if own.iter().any(|&ts| (t - ts).abs() < gap) {
                continue;
            }
            let sig = r.p.dot(&fs.eval(&r.x)?);
            let slack = arc[s] * sig;
            if slack < margin {
                margin = slack;
                locations.clear();
                locations.push(format!("u_{} sigma_{} at t={t}", s + 1, s + 1));
            }
        }
    }
    values.push(("off_switch_margin".into(), margin));

    // Switching functions vanish at their own switches.
    let sf = rf.switching_functions(thresholds.grid_points)?;
    for sw in &sf.simple {
        let r = sw.value.abs();
        values.push((
            format!("sigma_{}_at_theta_{}{}", sw.component + 1, sw.arc.0, sw.arc.1),
            r,
        ));
        if r > residual {
            residual = r;
            locations.push(format!(
                "sigma_{} at simple switch t={}",
                sw.component + 1,
                sw.time
            ));
        }
    }
    for nu in 0..2 {
        let r = sf.double_value[nu].abs();
        values.push((format!("sigma_{}_at_tau", nu + 1), r));
        if r > residual {
            residual = r;
            locations.push(format!("sigma_{} at tau", nu + 1));
        }
    }

    Ok(ConditionReport::finish(
        "regularity",
        margin,
        residual,
        locations,
        values,
        thresholds,
        scale,
    ))
}

fn cross_check(name: &str, vals: &[f64], tol: f64) -> Result<f64> {
    let vmax = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut worst: f64 = 0.0;
    for i in 0..vals.len() {
        for j in i + 1..vals.len() {
            worst = worst.max((vals[i] - vals[j]).abs());
        }
    }
    if worst > tol * vmax.max(1.0) {
        return Err(CoreError::Invalid(format!(
            "{name}: Legendre formulations disagree by {worst} (values {vals:?})"
        )));
    }
    Ok(worst)
}

/// One-sided derivative of `t ↦ ⟨λ̂(t), w(ξ̂(t))⟩` by a three-point stencil
/// on the given side of `t0`.
fn trace_derivative(
    rf: &ReferenceFlow,
    w: &crate::exprlang::VectorFieldSpec,
    t0: f64,
    side: f64,
    h: f64,
) -> Result<f64> {
    let eval = |t: f64| -> Result<f64> {
        let r = rf.reference_at(t)?;
        Ok(r.p.dot(&w.eval(&r.x)?))
    };
    let f0 = eval(t0)?;
    let f1 = eval(t0 + side * h)?;
    let f2 = eval(t0 + 2.0 * side * h)?;
    Ok(side * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h))
}

fn stencil_width(rf: &ReferenceFlow) -> f64 {
    let b = rf.extremal.schedule.boundaries(rf.horizon());
    let min_arc = b
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    (1e-4 * rf.horizon()).min(min_arc / 8.0)
}

/// Assumption 2 at every simple switch, in all three formulations.
pub fn check_legendre_simple(
    rf: &ReferenceFlow,
    pulled: &PulledBackFields,
    thresholds: &ConditionThresholds,
) -> Result<ConditionReport> {
    let sched = &rf.extremal.schedule;
    let scale = lambda_scale(rf, 101)?;
    let h = stencil_width(rf);
    let mut margin = f64::INFINITY;
    let mut locations = Vec::new();
    let mut values = Vec::new();

    for i in 0..2usize {
        let count = if i == 0 { rf.j0() } else { rf.j1() };
        for j in 1..=count {
            let t0 = sched.arc_start(i, j);
            let kprev = rf.arc_spec(sched.arc_index(i, j - 1)).clone();
            let knext = rf.arc_spec(sched.arc_index(i, j)).clone();
            let diff = sub_fields(&knext, &kprev)?;

            // (1) One-sided trace derivatives from both adjacent arcs; the
            // trace is differentiable at the switch so they agree.
            let d_left = trace_derivative(rf, &diff, t0, -1.0, h)?;
            let d_right = trace_derivative(rf, &diff, t0, 1.0, h)?;
            let v1 = 0.5 * (d_left + d_right);
            // (2) Bracket pairing at the switch point.
            let lam = rf.lambda_at(t0)?;
            let v2 = symplectic_pairing(&kprev, &knext, &lam)?;
            // (3) Pulled-back bracket pairing at x̂_0.
            let v3 = pulled.bracket_pairing(pulled.g_at(i, j - 1), pulled.g_at(i, j));

            let worst = cross_check(
                &format!("simple switch ({i},{j})"),
                &[v1, d_left, d_right, v2, v3],
                thresholds.cross_tol * scale.max(1.0),
            )?;
            values.push((format!("legendre_{i}{j}_trace"), v1));
            values.push((format!("legendre_{i}{j}_bracket"), v2));
            values.push((format!("legendre_{i}{j}_pullback"), v3));
            values.push((format!("legendre_{i}{j}_crosscheck"), worst));
            if v2 < margin {
                margin = v2;
                locations.clear();
                locations.push(format!("simple switch ({i},{j}) at t={t0}"));
            }
        }
    }
    if rf.j0() + rf.j1() == 0 {
        locations.push("no simple switches".into());
    }

    Ok(ConditionReport::finish(
        "legendre-simple",
        margin,
        0.0,
        locations,
        values,
        thresholds,
        scale,
    ))
}

/// Assumption 3: the four strict inequalities at the double switch, in all
/// three formulations.
pub fn check_legendre_double(
    rf: &ReferenceFlow,
    pulled: &PulledBackFields,
    thresholds: &ConditionThresholds,
) -> Result<ConditionReport> {
    let sched = &rf.extremal.schedule;
    let tau = sched.tau;
    let scale = lambda_scale(rf, 101)?;
    let h = stencil_width(rf);
    let j0 = rf.j0();
    let k0j0 = rf.arc_spec(j0).clone();
    let k10 = rf.arc_spec(j0 + 1).clone();
    let lam_tau = rf.lambda_at(tau)?;

    let mut margin = f64::INFINITY;
    let mut locations = Vec::new();
    let mut values = Vec::new();

    for nu in 1..=2usize {
        let knu = rf.knu_spec(nu).clone();

        // Entry inequality: d/dt (K_nu - K_0J0) at tau-.
        let diff_in = sub_fields(&knu, &k0j0)?;
        let v1 = trace_derivative(rf, &diff_in, tau, -1.0, h)?;
        let v2 = symplectic_pairing(&k0j0, &knu, &lam_tau)?;
        let v3 = pulled.bracket_pairing(pulled.g_at(0, j0), &pulled.h[nu - 1]);
        let w_in = cross_check(
            &format!("double switch entry (nu={nu})"),
            &[v1, v2, v3],
            thresholds.cross_tol * scale.max(1.0),
        )?;
        values.push((format!("legendre_tau_entry_{nu}_trace"), v1));
        values.push((format!("legendre_tau_entry_{nu}_bracket"), v2));
        values.push((format!("legendre_tau_entry_{nu}_pullback"), v3));
        values.push((format!("legendre_tau_entry_{nu}_crosscheck"), w_in));
        if v2 < margin {
            margin = v2;
            locations.clear();
            locations.push(format!("entry inequality nu={nu} at tau={tau}"));
        }

        // Exit inequality: d/dt (K_10 - K_nu) at tau+.
        let diff_out = sub_fields(&k10, &knu)?;
        let v1 = trace_derivative(rf, &diff_out, tau, 1.0, h)?;
        let v2 = symplectic_pairing(&knu, &k10, &lam_tau)?;
        let v3 = pulled.bracket_pairing(&pulled.h[nu - 1], pulled.g_at(1, 0));
        let w_out = cross_check(
            &format!("double switch exit (nu={nu})"),
            &[v1, v2, v3],
            thresholds.cross_tol * scale.max(1.0),
        )?;
        values.push((format!("legendre_tau_exit_{nu}_trace"), v1));
        values.push((format!("legendre_tau_exit_{nu}_bracket"), v2));
        values.push((format!("legendre_tau_exit_{nu}_pullback"), v3));
        values.push((format!("legendre_tau_exit_{nu}_crosscheck"), w_out));
        if v2 < margin {
            margin = v2;
            locations.clear();
            locations.push(format!("exit inequality nu={nu} at tau={tau}"));
        }
    }

    Ok(ConditionReport::finish(
        "legendre-double",
        margin,
        0.0,
        locations,
        values,
        thresholds,
        scale,
    ))
}

fn sub_fields(
    a: &crate::exprlang::VectorFieldSpec,
    b: &crate::exprlang::VectorFieldSpec,
) -> Result<crate::exprlang::VectorFieldSpec> {
    use crate::exprlang::Expr;
    let comps = a
        .components
        .iter()
        .zip(&b.components)
        .map(|(x, y)| Expr::sub(x.clone(), y.clone()).fold())
        .collect();
    crate::exprlang::VectorFieldSpec::new(a.n, comps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::{parse_expr, VectorFieldSpec};
    use crate::flows::{ReferenceExtremal, SwitchingSchedule};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn tent3_with_costs() -> (ControlAffineProblem, ReferenceExtremal) {
        let n = 2;
        let p = ControlAffineProblem {
            n,
            m: 3,
            drift: VectorFieldSpec::parse(n, &["1", "0"]).unwrap(),
            controlled: vec![
                VectorFieldSpec::parse(n, &["0", "x1-0.5"]).unwrap(),
                VectorFieldSpec::parse(n, &["0", "2*(x1-0.5)"]).unwrap(),
                VectorFieldSpec::parse(n, &["0", "-(x1-0.3)*(x1-0.7)"]).unwrap(),
            ],
            cost_initial: parse_expr("x2", n).unwrap(),
            cost_final: parse_expr("-x2", n).unwrap(),
            manifold_initial: vec![],
            manifold_final: vec![],
            horizon: 1.0,
        };
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

    fn tent2() -> (ControlAffineProblem, ReferenceExtremal) {
        let n = 2;
        let p = ControlAffineProblem {
            n,
            m: 2,
            drift: VectorFieldSpec::parse(n, &["1", "0"]).unwrap(),
            controlled: vec![
                VectorFieldSpec::parse(n, &["0", "x1-0.5"]).unwrap(),
                VectorFieldSpec::parse(n, &["0", "2*(x1-0.5)"]).unwrap(),
            ],
            cost_initial: parse_expr("x2", n).unwrap(),
            cost_final: parse_expr("-x2", n).unwrap(),
            manifold_initial: vec![],
            manifold_final: vec![],
            horizon: 1.0,
        };
        let ex = ReferenceExtremal {
            x0: DVector::from_vec(vec![0.0, 0.0]),
            lambda0: DVector::from_vec(vec![0.0, 1.0]),
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
    fn pmp_passes_on_consistent_costs() {
        let (p, ex) = tent3_with_costs();
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let rep = check_pmp(&rf, &ConditionThresholds::default()).unwrap();
        assert!(rep.pass, "pmp report: {rep:?}");
        assert!(rep.residual < 1e-8);
    }

    #[test]
    fn pmp_transversality_vacuous_on_point_manifold() {
        let (mut p, ex) = tent3_with_costs();
        // N0 = {x0}: full constraints, empty tangent basis.
        p.manifold_initial = vec![parse_expr("x1", 2).unwrap(), parse_expr("x2", 2).unwrap()];
        // Break the cost on purpose; transversality at 0 must stay vacuous.
        p.cost_initial = parse_expr("3*x1+7*x2", 2).unwrap();
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let rep = check_pmp(&rf, &ConditionThresholds::default()).unwrap();
        assert!(rep.pass, "pmp report: {rep:?}");
    }

    #[test]
    fn pmp_fails_on_wrong_transversality() {
        let (mut p, ex) = tent3_with_costs();
        p.cost_initial = parse_expr("x1", 2).unwrap();
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let rep = check_pmp(&rf, &ConditionThresholds::default()).unwrap();
        assert!(!rep.pass);
        assert!(rep.residual > 0.5);
    }

    #[test]
    fn regularity_margin_is_positive_on_tent() {
        let (p, ex) = tent3_with_costs();
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let rep = check_regularity(&rf, &ConditionThresholds::default()).unwrap();
        assert!(rep.pass, "regularity report: {rep:?}");
        assert!(rep.margin > 1e-4);
        assert!(rep.residual < 1e-9);
    }

    #[test]
    fn regularity_rejects_singular_component() {
        // Third control multiplies the zero field: sigma_3 == 0 identically.
        let (mut p, mut ex) = tent2();
        p.m = 3;
        p.controlled
            .push(VectorFieldSpec::parse(2, &["0", "0"]).unwrap());
        ex.schedule.arc_controls = vec![vec![-1.0, -1.0, -1.0], vec![1.0, 1.0, -1.0]];
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let rep = check_regularity(&rf, &ConditionThresholds::default()).unwrap();
        assert!(!rep.pass);
        assert!(rep.margin.abs() < 1e-12);
    }

    #[test]
    fn legendre_simple_values_and_agreement() {
        let (p, ex) = tent3_with_costs();
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let pulled = rf.pull_back_fields().unwrap();
        let rep = check_legendre_simple(&rf, &pulled, &ConditionThresholds::default()).unwrap();
        assert!(rep.pass, "legendre-simple report: {rep:?}");
        // Both simple switches carry the bracket value 0.8.
        assert_relative_eq!(rep.margin, 0.8, epsilon = 1e-7);
    }

    #[test]
    fn legendre_simple_fails_on_commuting_constant_fields() {
        let n = 2;
        let p = ControlAffineProblem {
            n,
            m: 3,
            drift: VectorFieldSpec::parse(n, &["1", "0"]).unwrap(),
            controlled: vec![
                VectorFieldSpec::parse(n, &["0", "1"]).unwrap(),
                VectorFieldSpec::parse(n, &["1", "1"]).unwrap(),
                VectorFieldSpec::parse(n, &["0.5", "0"]).unwrap(),
            ],
            cost_initial: parse_expr("0", n).unwrap(),
            cost_final: parse_expr("0", n).unwrap(),
            manifold_initial: vec![],
            manifold_final: vec![],
            horizon: 1.0,
        };
        let ex = ReferenceExtremal {
            x0: DVector::zeros(2),
            lambda0: DVector::from_vec(vec![1.0, 1.0]),
            p0: 1,
            schedule: SwitchingSchedule {
                theta0: vec![0.25],
                tau: 0.5,
                theta1: vec![],
                arc_controls: vec![
                    vec![-1.0, -1.0, -1.0],
                    vec![-1.0, -1.0, 1.0],
                    vec![1.0, 1.0, 1.0],
                ],
            },
        };
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let pulled = rf.pull_back_fields().unwrap();
        let rep = check_legendre_simple(&rf, &pulled, &ConditionThresholds::default()).unwrap();
        assert!(!rep.pass);
        assert!(rep.margin.abs() < 1e-9);
    }

    #[test]
    fn legendre_double_values_on_tent() {
        let (p, ex) = tent2();
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let pulled = rf.pull_back_fields().unwrap();
        let rep = check_legendre_double(&rf, &pulled, &ConditionThresholds::default()).unwrap();
        assert!(rep.pass, "legendre-double report: {rep:?}");
        assert_relative_eq!(rep.margin, 2.0, epsilon = 1e-7);
        // With [f1, f2] = 0 the exit value of branch nu equals the entry
        // value of branch 3-nu (the identity k_10 - k_nu = 2 f_{3-nu}).
        let get = |name: &str| -> f64 {
            rep.values
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| *v)
                .unwrap()
        };
        assert_relative_eq!(
            get("legendre_tau_exit_1_bracket"),
            get("legendre_tau_entry_2_bracket"),
            epsilon = 1e-9
        );
        assert_relative_eq!(
            get("legendre_tau_exit_2_bracket"),
            get("legendre_tau_entry_1_bracket"),
            epsilon = 1e-9
        );
        assert_relative_eq!(get("legendre_tau_entry_1_bracket"), 2.0, epsilon = 1e-9);
        assert_relative_eq!(get("legendre_tau_entry_2_bracket"), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn legendre_double_fails_on_constant_fields() {
        let n = 2;
        let p = ControlAffineProblem {
            n,
            m: 2,
            drift: VectorFieldSpec::parse(n, &["1", "0"]).unwrap(),
            controlled: vec![
                VectorFieldSpec::parse(n, &["0", "1"]).unwrap(),
                VectorFieldSpec::parse(n, &["1", "1"]).unwrap(),
            ],
            cost_initial: parse_expr("0", n).unwrap(),
            cost_final: parse_expr("0", n).unwrap(),
            manifold_initial: vec![],
            manifold_final: vec![],
            horizon: 1.0,
        };
        let ex = ReferenceExtremal {
            x0: DVector::zeros(2),
            lambda0: DVector::from_vec(vec![1.0, 1.0]),
            p0: 1,
            schedule: SwitchingSchedule {
                theta0: vec![],
                tau: 0.5,
                theta1: vec![],
                arc_controls: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
            },
        };
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let pulled = rf.pull_back_fields().unwrap();
        let rep = check_legendre_double(&rf, &pulled, &ConditionThresholds::default()).unwrap();
        assert!(!rep.pass);
        assert!(rep.margin.abs() < 1e-9);
    }

    #[test]
    fn margins_scale_with_the_covector() {
        let (p, ex) = tent3_with_costs();
        let rf = ReferenceFlow::new(&p, &ex, OdeOptions::default()).unwrap();
        let pulled = rf.pull_back_fields().unwrap();
        let base = check_legendre_simple(&rf, &pulled, &ConditionThresholds::default()).unwrap();

        let c = 5.0;
        let mut p2 = p.clone();
        p2.cost_initial = parse_expr("5*x2", 2).unwrap();
        p2.cost_final = parse_expr("-5*x2", 2).unwrap();
        let ex2 = ReferenceExtremal {
            lambda0: c * &ex.lambda0,
            ..ex.clone()
        };
        let rf2 = ReferenceFlow::new(&p2, &ex2, OdeOptions::default()).unwrap();
        let pulled2 = rf2.pull_back_fields().unwrap();
        let scaled =
            check_legendre_simple(&rf2, &pulled2, &ConditionThresholds::default()).unwrap();
        assert_relative_eq!(scaled.margin, c * base.margin, max_relative = 1e-7);
        assert!(base.pass && scaled.pass);

        let pmp2 = check_pmp(&rf2, &ConditionThresholds::default()).unwrap();
        assert!(pmp2.pass, "scaled pmp: {pmp2:?}");
    }
}
