//! Ground-truth oracles: exact integration of the switching-shift
//! subproblem cost, and desk-scale brute-force sampling of perturbed
//! bang-bang trajectories around the reference.

use anyhow::{bail, Result};
use bbcert::exprlang::CompiledField;
use bbcert::flows::ReferenceFlow;
use bbcert::ode::integrate;
use bbcert::secondvar::BoundaryPenalty;
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The shifted switching sequence of the subproblem: every simple switch
/// moved by its `δ`, the double switch decoupled into `τ̂ + ε_1`, `τ̂ + ε_2`
/// with the first-switching branch inserted between them.
fn shifted_times(
    rf: &ReferenceFlow,
    delta: &[f64],
    eps: (f64, f64),
) -> Result<(Vec<f64>, usize)> {
    let sched = &rf.extremal.schedule;
    let j0 = sched.j0();
    let j1 = sched.j1();
    if delta.len() != j0 + j1 {
        bail!(
            "expected {} simple-switch shifts, got {}",
            j0 + j1,
            delta.len()
        );
    }
    let tau1 = sched.tau + eps.0;
    let tau2 = sched.tau + eps.1;
    let nu = if eps.0 <= eps.1 { 1 } else { 2 };
    let mut times = Vec::with_capacity(j0 + j1 + 3);
    for j in 0..j0 {
        times.push(sched.theta0[j] + delta[j]);
    }
    times.push(tau1.min(tau2));
    times.push(tau1.max(tau2));
    for j in 0..j1 {
        times.push(sched.theta1[j] + delta[j0 + j]);
    }
    // Orderings of the shifted subproblem.
    let mut prev = 0.0;
    for (k, t) in times.iter().enumerate() {
        let strict = k != j0 + 1; // min tau <= max tau may coincide
        if (strict && *t <= prev) || (!strict && *t < prev) {
            bail!("shifted switching times out of order at index {k}: {times:?}");
        }
        prev = *t;
    }
    if prev >= rf.horizon() {
        bail!("shifted switching times exceed the horizon: {times:?}");
    }
    Ok((times, nu))
}

/// Integrate the perturbed concatenation from `x0` and return the final
/// state. The arc fields are the reference ones with the branch field
/// `k_ν` inserted between the decoupled double-switch times.
fn integrate_shifted(
    rf: &ReferenceFlow,
    x0: &DVector<f64>,
    times: &[f64],
    nu: usize,
) -> Result<DVector<f64>> {
    let sched = &rf.extremal.schedule;
    let j0 = sched.j0();
    let j1 = sched.j1();

    // Arc fields in play order.
    let mut fields: Vec<&CompiledField> = Vec::new();
    for j in 0..=j0 {
        fields.push(rf.arc_field(sched.arc_index(0, j)));
    }
    fields.push(rf.knu_field(nu));
    for j in 0..=j1 {
        fields.push(rf.arc_field(sched.arc_index(1, j)));
    }

    let mut bounds = Vec::with_capacity(times.len() + 2);
    bounds.push(0.0);
    bounds.extend_from_slice(times);
    bounds.push(rf.horizon());

    let mut x = x0.clone();
    for (k, f) in fields.iter().enumerate() {
        let span = bounds[k + 1] - bounds[k];
        if span == 0.0 {
            continue;
        }
        x = integrate(|_, y| f.eval(y), 0.0, span, x, &rf.opts)?;
    }
    Ok(x)
}

/// Exact subproblem cost `α(x0) + β(ξ(T))` along the shifted concatenation.
pub fn fp_cost_oracle(
    rf: &ReferenceFlow,
    pen: &BoundaryPenalty,
    x0: &DVector<f64>,
    delta: &[f64],
    eps: (f64, f64),
) -> Result<f64> {
    let (times, nu) = shifted_times(rf, delta, eps)?;
    let xt = integrate_shifted(rf, x0, &times, nu)?;
    Ok(pen.alpha(rf, x0)? + pen.beta(rf, &xt)?)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub radius: f64,
    pub samples: usize,
    pub seed: u64,
    /// Endpoint admissibility tolerance against the final manifold.
    pub endpoint_tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            radius: 1e-2,
            samples: 2000,
            seed: 0x5eed,
            endpoint_tol: 1e-8,
        }
    }
}

/// Outcome of the brute-force search for cheaper admissible neighbors.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub samples: usize,
    pub accepted: usize,
    /// Smallest cost gap `C(sample) − C(reference)` over accepted samples.
    pub min_gap: f64,
    /// Smallest gap among perturbations of norm above `1e-4`.
    pub min_gap_large: f64,
    pub max_gap: f64,
    /// Perturbation achieving `min_gap`: simple shifts, then the two
    /// double-switch shifts, then the initial-point displacement.
    pub worst: Vec<f64>,
    /// `min_gap` below the numerical floor `−1e-10·(1 + |C_ref|)`.
    pub refuted: bool,
}

/// Sample admissible perturbed controls (all switching-time shifts within
/// the radius, both orderings of the decoupled double switch) and perturbed
/// initial points on the initial manifold; integrate each trajectory with
/// the original dynamics and compare the original costs.
pub fn brute_force_oracle(
    rf: &ReferenceFlow,
    opts: &OracleOptions,
) -> Result<OracleOutcome> {
    let problem = &rf.problem;
    let ex = &rf.extremal;
    let n = problem.n;
    let j0 = ex.schedule.j0();
    let j1 = ex.schedule.j1();
    let shifts = j0 + j1;

    // Tangent directions of the initial manifold.
    let jac0 = bbcert::geometry::ControlAffineProblem::constraint_jacobian(
        &problem.manifold_initial,
        &ex.x0,
    )?;
    let tangent = bbcert::conditions::tangent_basis(&jac0, n)?;

    let c_ref = problem.cost_initial.eval(ex.x0.as_slice())?
        + problem.cost_final.eval(rf.x_final().as_slice())?;
    let floor = 1e-10 * (1.0 + c_ref.abs());

    let mut accepted = 0usize;
    let mut min_gap = f64::INFINITY;
    let mut min_gap_large = f64::INFINITY;
    let mut max_gap = f64::NEG_INFINITY;
    let mut worst: Vec<f64> = Vec::new();

    for k in 0..opts.samples {
        // Per-sample stream derived from (seed, index).
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if opts.radius > 0.0 {
                rng.gen_range(-opts.radius..opts.radius)
            } else {
                0.0
            }
        };
        let delta: Vec<f64> = (0..shifts).map(|_| draw(&mut rng)).collect();
        let eps = (draw(&mut rng), draw(&mut rng));
        let mut x0 = ex.x0.clone();
        let mut dx_norm = 0.0;
        if !tangent.is_empty() {
            let mut dx = DVector::zeros(n);
            for v in &tangent {
                dx += v * draw(&mut rng);
            }
            dx_norm = dx.norm();
            x0 += dx;
            // Project back onto the manifold (exact for affine constraints).
            x0 = project_onto_manifold(problem, x0)?;
        }

        let (times, nu) = match shifted_times(rf, &delta, eps) {
            Ok(v) => v,
            Err(_) => continue, // shifted ordering left the admissible box
        };
        let xt = match integrate_shifted(rf, &x0, &times, nu) {
            Ok(v) => v,
            Err(_) => continue,
        };

        // Endpoint admissibility against the final manifold.
        let mut admissible = true;
        for c in &problem.manifold_final {
            if c.eval(xt.as_slice())?.abs() > opts.endpoint_tol {
                admissible = false;
                break;
            }
        }
        if !admissible {
            continue;
        }

        let cost = problem.cost_initial.eval(x0.as_slice())?
            + problem.cost_final.eval(xt.as_slice())?;
        let gap = cost - c_ref;
        accepted += 1;
        max_gap = max_gap.max(gap);
        let mut pert_norm: f64 = delta.iter().map(|d| d * d).sum::<f64>()
            + eps.0 * eps.0
            + eps.1 * eps.1;
        pert_norm = (pert_norm + dx_norm * dx_norm).sqrt();
        if gap < min_gap {
            min_gap = gap;
            worst = delta.clone();
            worst.push(eps.0);
            worst.push(eps.1);
            worst.push(dx_norm);
        }
        if pert_norm > 1e-4 && gap < min_gap_large {
            min_gap_large = gap;
        }
    }

    if accepted == 0 {
        bail!(
            "no accepted samples: radius {} too small relative to final-manifold reachability",
            opts.radius
        );
    }
    Ok(OracleOutcome {
        samples: opts.samples,
        accepted,
        min_gap,
        min_gap_large,
        max_gap,
        worst,
        refuted: min_gap < -floor,
    })
}

/// Feasibility projection by Gauss-Newton on the constraint residuals;
/// exact in one step for affine constraints.
fn project_onto_manifold(
    problem: &bbcert::geometry::ControlAffineProblem,
    mut x: DVector<f64>,
) -> Result<DVector<f64>> {
    if problem.manifold_initial.is_empty() {
        return Ok(x);
    }
    for _ in 0..20 {
        let mut c = DVector::zeros(problem.manifold_initial.len());
        for (i, e) in problem.manifold_initial.iter().enumerate() {
            c[i] = e.eval(x.as_slice())?;
        }
        if c.amax() < 1e-13 {
            break;
        }
        let j = bbcert::geometry::ControlAffineProblem::constraint_jacobian(
            &problem.manifold_initial,
            &x,
        )?;
        let jjt = &j * j.transpose();
        let y = jjt
            .lu()
            .solve(&c)
            .ok_or_else(|| anyhow::anyhow!("rank-deficient initial manifold"))?;
        x -= j.transpose() * y;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problemfile::load_problem_str;
    use approx::assert_relative_eq;
    use bbcert::ode::OdeOptions;

    fn tent() -> (ReferenceFlow, BoundaryPenalty) {
        let text = r#"
dimension = 2
controls = 2
horizon = 1.0
drift = ["1", "0"]
fields = [["0", "x1-0.5"], ["0", "2*(x1-0.5)"]]
cost_initial = "x2 + 5.0*(x1^2 + x2^2)"
cost_final = "-x2 + 5.0*((x1-1.0)^2 + (x2-0.75)^2)"
x0 = [0.0, 0.0]
lambda0 = [0.0, 1.0]
p0 = 1

[schedule]
tau = 0.5
arc_controls = [[-1.0, -1.0], [1.0, 1.0]]
"#;
        let loaded = load_problem_str(text).unwrap();
        let rf = ReferenceFlow::new(&loaded.problem, &loaded.extremal, OdeOptions::default())
            .unwrap();
        let pen = BoundaryPenalty::new(&rf, None, None).unwrap();
        (rf, pen)
    }

    #[test]
    fn zero_shift_reproduces_reference_cost() {
        let (rf, pen) = tent();
        let cost = fp_cost_oracle(&rf, &pen, &rf.extremal.x0.clone(), &[], (0.0, 0.0)).unwrap();
        let expect = pen.alpha(&rf, &rf.extremal.x0).unwrap()
            + pen.beta(&rf, rf.x_final()).unwrap();
        assert_relative_eq!(cost, expect, epsilon = 1e-10);
    }

    #[test]
    fn first_differences_vanish_on_kernel_directions() {
        // Stationarity at the reference: directional first differences of
        // the subproblem cost are O(t^2).
        let (rf, pen) = tent();
        let x0 = rf.extremal.x0.clone();
        let t = 1e-5;
        for (de1, de2, dxs) in [(1.0, 0.5, 0.2), (-0.5, 1.0, -0.4), (0.0, 0.0, 1.0)] {
            let dx = DVector::from_vec(vec![0.3 * dxs, -0.2 * dxs]);
            let cp = fp_cost_oracle(&rf, &pen, &(&x0 + &dx * t), &[], (t * de1, t * de2)).unwrap();
            let c0 = fp_cost_oracle(&rf, &pen, &x0, &[], (0.0, 0.0)).unwrap();
            assert!(
                (cp - c0).abs() < 5e-9,
                "first difference too large: {}",
                cp - c0
            );
        }
    }

    #[test]
    fn ordering_violation_is_reported() {
        let (rf, pen) = tent();
        let err = fp_cost_oracle(&rf, &pen, &rf.extremal.x0.clone(), &[], (0.7, 0.0)).unwrap_err();
        assert!(format!("{err:#}").contains("horizon") || format!("{err:#}").contains("order"));
    }

    #[test]
    fn zero_radius_oracle_returns_zero_gap() {
        let (rf, _) = tent();
        let out = brute_force_oracle(
            &rf,
            &OracleOptions {
                radius: 0.0,
                samples: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.accepted, 10);
        assert!(out.min_gap.abs() < 1e-12);
        assert!(!out.refuted);
    }

    #[test]
    fn coercive_tent_has_nonnegative_gaps() {
        let (rf, _) = tent();
        let out = brute_force_oracle(
            &rf,
            &OracleOptions {
                radius: 1e-2,
                samples: 500,
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.min_gap >= -1e-10, "min gap {}", out.min_gap);
        assert!(out.min_gap_large > 1e-9, "large-perturbation gap {}", out.min_gap_large);
    }
}
