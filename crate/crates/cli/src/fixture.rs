//! Synthetic problem construction by reverse engineering: the reference
//! trajectory and adjoint are produced by forward synthesis with
//! event-detected switching (`u_s = sgn σ_s`), the double switch is forced
//! by tuning one field coefficient until both switching functions vanish
//! at the same instant, and the endpoint costs are frozen afterwards so
//! PMP transversality holds by construction.
//!
//! Every fixture is re-verified through the condition checks before being
//! returned; infeasible draws are retried with derived sub-seeds.

use crate::problemfile::{OptionsFile, ProblemFile, ScheduleFile};
use anyhow::{bail, Context, Result};
use bbcert::conditions::{
    check_legendre_double, check_legendre_simple, check_pmp, check_regularity,
    ConditionThresholds,
};
use bbcert::exprlang::{CompiledField, VectorFieldSpec};
use bbcert::flows::ReferenceFlow;
use bbcert::ode::{integrate, OdeOptions};
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

/// The synthetic problem families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureRecipe {
    /// Noncommuting double switch with one simple switch on each side;
    /// generic `dτ` and coercive second variations.
    NormalGeneric,
    /// Abnormal extremal (`p_0 = 0`) between point manifolds.
    Abnormal,
    /// `⟨λ̂(τ̂), [f_1, f_2](x̂_d)⟩ = 0`, so the two branch forms coincide.
    CommutingF1F2,
    /// Strongly concave final cost: Legendre holds, coercivity fails.
    CoercivityBroken,
    /// `f_1 = f_2`, forcing `dτ_1 ≡ dτ_2` and the Clarke-hull branch.
    DegenerateDtau,
}

impl FromStr for FixtureRecipe {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "normal-generic" => FixtureRecipe::NormalGeneric,
            "abnormal" => FixtureRecipe::Abnormal,
            "commuting-f1f2" => FixtureRecipe::CommutingF1F2,
            "coercivity-broken" => FixtureRecipe::CoercivityBroken,
            "degenerate-dtau" => FixtureRecipe::DegenerateDtau,
            other => bail!(
                "unknown recipe `{other}`; expected one of normal-generic, abnormal, \
                 commuting-f1f2, coercivity-broken, degenerate-dtau"
            ),
        })
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// `⟨w, x⟩` as an expression string.
fn dot_expr(w: &[f64]) -> String {
    let mut s = String::new();
    for (i, c) in w.iter().enumerate() {
        if i > 0 {
            s.push_str(" + ");
        }
        s.push_str(&format!("{}*x{}", fmt(*c), i + 1));
    }
    s
}

/// `0.5*k*|x - c|^2` as an expression string.
fn quad_expr(k: f64, center: &[f64]) -> String {
    let mut s = format!("{}*0.5*(", fmt(k));
    for (i, c) in center.iter().enumerate() {
        if i > 0 {
            s.push_str(" + ");
        }
        s.push_str(&format!("(x{}-{})^2", i + 1, fmt(*c)));
    }
    s.push(')');
    s
}

/// Build and verify a fixture; retries with derived sub-seeds on
/// infeasible draws.
pub fn construct_fixture(recipe: FixtureRecipe, seed: u64) -> Result<ProblemFile> {
    let mut last_err = None;
    for attempt in 0..50u64 {
        let sub = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(attempt);
        let result = match recipe {
            FixtureRecipe::NormalGeneric => normal_generic(sub, 10.0, 10.0),
            FixtureRecipe::CoercivityBroken => normal_generic(sub, 10.0, -25.0),
            FixtureRecipe::Abnormal => abnormal(sub),
            FixtureRecipe::CommutingF1F2 => commuting(sub),
            FixtureRecipe::DegenerateDtau => degenerate_dtau(sub),
        };
        match result {
            Ok(mut file) => match verify(recipe, &file) {
                Ok(()) => {
                    // Echo the caller's seed (TOML integers are i64; the
                    // derived sub-seed may not fit).
                    file.options.seed = Some(seed.min(i64::MAX as u64));
                    return Ok(file);
                }
                Err(e) => last_err = Some(e),
            },
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| anyhow::anyhow!("recipe infeasible")))
        .context(format!("recipe {recipe:?} infeasible after 50 draws"))
}

/// Re-run the condition checks (and, for the healthy recipes, Legendre
/// margins) on the emitted file.
fn verify(recipe: FixtureRecipe, file: &ProblemFile) -> Result<()> {
    let loaded = file.validate()?;
    let rf = ReferenceFlow::new(&loaded.problem, &loaded.extremal, loaded.ode)?;
    let thresholds = ConditionThresholds::default();
    let pmp = check_pmp(&rf, &thresholds)?;
    if !pmp.pass {
        bail!("fixture fails PMP residuals: {pmp:?}");
    }
    let reg = check_regularity(&rf, &thresholds)?;
    if !reg.pass {
        bail!("fixture fails regularity: margin {}", reg.margin);
    }
    let pulled = rf.pull_back_fields()?;
    let leg1 = check_legendre_simple(&rf, &pulled, &thresholds)?;
    let leg2 = check_legendre_double(&rf, &pulled, &thresholds)?;
    if !leg1.pass || !leg2.pass {
        bail!(
            "fixture fails Legendre margins: simple {}, double {}",
            leg1.margin,
            leg2.margin
        );
    }
    match recipe {
        FixtureRecipe::CommutingF1F2 | FixtureRecipe::DegenerateDtau => {
            let gap = pulled.bracket_pairing(&pulled.ftilde[0], &pulled.ftilde[1]);
            if gap.abs() > 1e-8 {
                bail!("commutator gap should vanish, got {gap}");
            }
        }
        FixtureRecipe::NormalGeneric | FixtureRecipe::CoercivityBroken => {
            let gap = pulled.bracket_pairing(&pulled.ftilde[0], &pulled.ftilde[1]);
            if gap.abs() < 1e-4 {
                bail!("commutator gap too small for a generic fixture: {gap}");
            }
        }
        FixtureRecipe::Abnormal => {}
    }
    Ok(())
}

/// Forward synthesis state: reference trajectory and adjoint with
/// event-detected switching.
struct Synth {
    drift: VectorFieldSpec,
    fields: Vec<VectorFieldSpec>,
    horizon: f64,
    ode: OdeOptions,
}

#[derive(Debug, Clone)]
struct SynthOutcome {
    /// (time, component) of each detected simple switch in order.
    simple_events: Vec<(f64, usize)>,
    /// The double switch time (first crossing of `σ_1`).
    tau: f64,
    /// `σ_2` at the double switch: the tuning residual.
    tau_residual: f64,
}

impl Synth {
    /// Integrate `(x, λ)` forward, flipping control components at detected
    /// zero crossings of their switching functions. Components 1 and 2 are
    /// both flipped at `σ_1`'s crossing; `σ_2`'s value there is the tuning
    /// residual.
    fn run(&self, x0: &DVector<f64>, l0: &DVector<f64>) -> Result<SynthOutcome> {
        let n = self.drift.n;
        let m = self.fields.len();
        let mut u = vec![-1.0; m];
        let mut y = DVector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(x0);
        y.rows_mut(n, n).copy_from(l0);

        let sigma = |y: &DVector<f64>, s: usize| -> Result<f64> {
            let x = y.rows(0, n).into_owned();
            let l = y.rows(n, n).into_owned();
            Ok(l.dot(&self.fields[s].eval(&x)?))
        };

        let mut t = 0.0f64;
        let mut simple_events = Vec::new();
        let mut tau = f64::NAN;
        let mut tau_residual = f64::NAN;
        let mut double_fired = false;
        let h = 1e-3 * self.horizon;

        // Compiled per control regime, not per substep.
        let mut field = CompiledField::new(&VectorFieldSpec::affine_combination(
            &self.drift,
            &self.fields,
            &u,
        )?);
        let mut recompile = false;
        while t < self.horizon - 1e-14 {
            if recompile {
                field = CompiledField::new(&VectorFieldSpec::affine_combination(
                    &self.drift,
                    &self.fields,
                    &u,
                )?);
                recompile = false;
            }
            let rhs = |_: f64, y: &DVector<f64>| -> bbcert::Result<DVector<f64>> {
                let x = y.rows(0, n).into_owned();
                let l = y.rows(n, n).into_owned();
                let v = field.eval(&x)?;
                let jac = field.jacobian(&x)?;
                let ldot = -(jac.transpose() * &l);
                let mut out = DVector::zeros(2 * n);
                out.rows_mut(0, n).copy_from(&v);
                out.rows_mut(n, n).copy_from(&ldot);
                Ok(out)
            };

            // Watched components: every s >= 3 always; s = 1 until the
            // double switch has fired.
            let mut watched: Vec<usize> = (2..m).collect();
            if !double_fired {
                watched.push(0);
            }

            let t1 = (t + h).min(self.horizon);
            let y1 = integrate(&rhs, t, t1, y.clone(), &self.ode)?;
            let mut crossing: Option<(f64, usize, DVector<f64>)> = None;
            // A genuine crossing starts clearly away from zero; this keeps
            // the detector from re-firing on the just-switched component.
            let tol = 1e-11;
            for &s in &watched {
                let f0 = sigma(&y, s)?;
                let f1 = sigma(&y1, s)?;
                if f0.abs() > tol && f0.signum() != f1.signum() {
                    // Bisect inside the substep.
                    let (mut lo, mut hi) = (t, t1);
                    let mut ylo = y.clone();
                    for _ in 0..70 {
                        let mid = 0.5 * (lo + hi);
                        let ymid = integrate(&rhs, lo, mid, ylo.clone(), &self.ode)?;
                        let fm = sigma(&ymid, s)?;
                        if fm.signum() == f0.signum() && fm != 0.0 {
                            lo = mid;
                            ylo = ymid;
                        } else {
                            hi = mid;
                        }
                    }
                    let tstar = 0.5 * (lo + hi);
                    let ystar = integrate(&rhs, lo, tstar, ylo, &self.ode)?;
                    match &crossing {
                        Some((tc, _, _)) if *tc <= tstar => {}
                        _ => crossing = Some((tstar, s, ystar)),
                    }
                }
            }

            match crossing {
                None => {
                    t = t1;
                    y = y1;
                }
                Some((tstar, s, ystar)) => {
                    t = tstar;
                    y = ystar;
                    if s == 0 {
                        tau = tstar;
                        tau_residual = sigma(&y, 1)?;
                        u[0] = -u[0];
                        u[1] = -u[1];
                        double_fired = true;
                    } else {
                        simple_events.push((tstar, s));
                        u[s] = -u[s];
                    }
                    recompile = true;
                }
            }
        }
        if !double_fired {
            bail!("synthesis never reached the double switch");
        }
        Ok(SynthOutcome {
            simple_events,
            tau,
            tau_residual,
        })
    }
}

/// The generic fixture: three states, three controls, one simple switch on
/// each side of the noncommuting double switch. One constant coefficient of
/// `f_2` is tuned by a secant iteration until `σ_2` vanishes at `σ_1`'s
/// crossing.
fn normal_generic(seed: u64, k0: f64, kf: f64) -> Result<ProblemFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let mut c = || rng.gen_range(-0.12f64..0.12);

    // Field skeleton; `K` is the tuned constant in f2's second component.
    let c1 = 0.25 + c().abs();
    let (a1, a2, a3) = (c(), c(), c());
    let (b1, b2) = (c(), c());
    let (d1, d2) = (c(), c());
    let drift = vec!["1".to_string(), format!("{}*x3", fmt(a3)), "0".to_string()];
    let f1 = |_k: f64| {
        vec![
            format!("{}*x3", fmt(c1)),
            format!("x1-0.5 + {}*x2 + {}*x3", fmt(a1), fmt(b1)),
            format!("{}*x3", fmt(d1)),
        ]
    };
    let f2 = |k: f64| {
        vec![
            "0".to_string(),
            format!("{} + 2*(x1-0.5) + {}*x2 + {}*x3", fmt(k), fmt(a2), fmt(b2)),
            format!("{}*x3", fmt(d2)),
        ]
    };
    let f3 = vec![
        "0".to_string(),
        format!("-(x1-0.3)*(x1-0.7) + {}*x2", fmt(0.3 * a1)),
        format!("{}*x2", fmt(d1 * 0.5)),
    ];

    let x0 = DVector::zeros(n);
    let l0 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
    let make_synth = |k: f64| -> Result<Synth> {
        Ok(Synth {
            drift: VectorFieldSpec::parse(n, &drift.iter().map(|s| s.as_str()).collect::<Vec<_>>())?,
            fields: vec![
                VectorFieldSpec::parse(n, &f1(k).iter().map(|s| s.as_str()).collect::<Vec<_>>())?,
                VectorFieldSpec::parse(n, &f2(k).iter().map(|s| s.as_str()).collect::<Vec<_>>())?,
                VectorFieldSpec::parse(n, &f3.iter().map(|s| s.as_str()).collect::<Vec<_>>())?,
            ],
            horizon: 1.0,
            ode: OdeOptions::default(),
        })
    };

    // Secant iteration on the tuning constant.
    let mut ka = 0.0;
    let mut kb = 0.05;
    let mut fa = make_synth(ka)?.run(&x0, &l0)?.tau_residual;
    let mut fb = make_synth(kb)?.run(&x0, &l0)?.tau_residual;
    let mut k_final = kb;
    for _ in 0..60 {
        if fb.abs() < 1e-13 {
            k_final = kb;
            break;
        }
        let step = fb * (kb - ka) / (fb - fa);
        let kc = kb - step;
        ka = kb;
        fa = fb;
        kb = kc;
        fb = make_synth(kb)?.run(&x0, &l0)?.tau_residual;
        k_final = kb;
    }
    let outcome = make_synth(k_final)?.run(&x0, &l0)?;
    if outcome.tau_residual.abs() > 1e-11 {
        bail!(
            "double-switch tuning did not converge: residual {}",
            outcome.tau_residual
        );
    }
    // Expect exactly one simple switch on each side of tau.
    let before: Vec<&(f64, usize)> = outcome
        .simple_events
        .iter()
        .filter(|(t, _)| *t < outcome.tau)
        .collect();
    let after: Vec<&(f64, usize)> = outcome
        .simple_events
        .iter()
        .filter(|(t, _)| *t > outcome.tau)
        .collect();
    if before.len() != 1 || after.len() != 1 {
        bail!(
            "unexpected switch structure: {} before, {} after",
            before.len(),
            after.len()
        );
    }

    let file = ProblemFile {
        dimension: n,
        controls: 3,
        horizon: 1.0,
        drift,
        fields: vec![f1(k_final), f2(k_final), f3],
        cost_initial: "0".into(),
        cost_final: "0".into(),
        manifold_initial: vec![],
        manifold_final: vec![],
        x0: vec![0.0; n],
        lambda0: vec![0.0, 1.0, 0.0],
        p0: 1,
        schedule: ScheduleFile {
            theta0: vec![before[0].0],
            tau: outcome.tau,
            theta1: vec![after[0].0],
            arc_controls: vec![
                vec![-1.0, -1.0, -1.0],
                vec![-1.0, -1.0, 1.0],
                vec![1.0, 1.0, 1.0],
                vec![1.0, 1.0, -1.0],
            ],
        },
        options: OptionsFile {
            seed: Some(seed),
            ..Default::default()
        },
    };
    freeze_quadratic_costs(file, k0, kf)
}

/// Exact commuting fixture: planar tent with a parabola-driven third
/// control (one simple switch each side); `[f_1, f_2] = 0` identically.
fn commuting(seed: u64) -> Result<ProblemFile> {
    let n = 2;
    let drift = vec!["1".to_string(), "0".to_string()];
    let f1 = vec!["0".to_string(), "x1-0.5".to_string()];
    let f2 = vec!["0".to_string(), "2*(x1-0.5)".to_string()];
    let f3 = vec!["0".to_string(), "-(x1-0.3)*(x1-0.7)".to_string()];
    let file_wo_costs = ProblemFile {
        dimension: n,
        controls: 3,
        horizon: 1.0,
        drift: drift.clone(),
        fields: vec![f1, f2, f3],
        cost_initial: "x2".into(),
        cost_final: "-x2".into(),
        manifold_initial: vec![],
        manifold_final: vec![],
        x0: vec![0.0, 0.0],
        lambda0: vec![0.0, 1.0],
        p0: 1,
        schedule: ScheduleFile {
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
        options: OptionsFile {
            seed: Some(seed),
            ..Default::default()
        },
    };
    freeze_quadratic_costs(file_wo_costs, 10.0, 10.0)
}

/// `f_1 = f_2`: the two decoupled switching-time functions coincide
/// identically, forcing the Clarke-hull branch of the invertibility check.
/// With `λ̂_0 = (0, 1)` and `x̂_0 = 0` the switching functions are exactly
/// `0.3 λ_1(t) + x_1(t) − 0.5 = t − 0.5`, while the field value at the
/// switch point stays away from zero, so the hull determinants genuinely
/// move.
fn degenerate_dtau(seed: u64) -> Result<ProblemFile> {
    let file = ProblemFile {
        dimension: 2,
        controls: 2,
        horizon: 1.0,
        drift: vec!["1".to_string(), "0".to_string()],
        fields: vec![
            vec!["0.3".to_string(), "x1-0.5".to_string()],
            vec!["0.3".to_string(), "x1-0.5".to_string()],
        ],
        cost_initial: "x2".into(),
        cost_final: "-x2".into(),
        manifold_initial: vec![],
        manifold_final: vec![],
        x0: vec![0.0, 0.0],
        lambda0: vec![0.0, 1.0],
        p0: 1,
        schedule: ScheduleFile {
            theta0: vec![],
            tau: 0.5,
            theta1: vec![],
            arc_controls: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
        },
        options: OptionsFile {
            seed: Some(seed),
            ..Default::default()
        },
    };
    freeze_quadratic_costs(file, 10.0, 10.0)
}

/// Abnormal fixture: `p_0 = 0` between point manifolds; the costs are
/// irrelevant and the covector alone carries PMP.
fn abnormal(seed: u64) -> Result<ProblemFile> {
    let mut file = ProblemFile {
        dimension: 2,
        controls: 2,
        horizon: 1.0,
        drift: vec!["1".to_string(), "0".to_string()],
        fields: vec![
            vec!["0".to_string(), "x1-0.5".to_string()],
            vec!["0".to_string(), "2*(x1-0.5)".to_string()],
        ],
        cost_initial: "0".into(),
        cost_final: "0".into(),
        manifold_initial: vec!["x1".to_string(), "x2".to_string()],
        manifold_final: vec![],
        x0: vec![0.0, 0.0],
        lambda0: vec![0.0, 1.0],
        p0: 0,
        schedule: ScheduleFile {
            theta0: vec![],
            tau: 0.5,
            theta1: vec![],
            arc_controls: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
        },
        options: OptionsFile {
            seed: Some(seed),
            ..Default::default()
        },
    };
    // The final manifold is the reached point.
    let loaded = file.validate()?;
    let rf = ReferenceFlow::new(&loaded.problem, &loaded.extremal, loaded.ode)?;
    let xf = rf.x_final();
    file.manifold_final = vec![
        format!("x1-{}", fmt(xf[0])),
        format!("x2-{}", fmt(xf[1])),
    ];
    Ok(file)
}

/// Fill in quadratic costs pinned to the (numerically integrated) adjoint
/// endpoints so transversality holds on the whole chart.
fn freeze_quadratic_costs(mut file: ProblemFile, k0: f64, kf: f64) -> Result<ProblemFile> {
    let loaded = file.validate()?;
    let rf = ReferenceFlow::new(&loaded.problem, &loaded.extremal, loaded.ode)?;
    let xf = rf.x_final().clone();
    let lf = rf.lambda_final().clone();
    let l0 = loaded.extremal.lambda0.clone();
    let zero = vec![0.0; loaded.problem.n];
    file.cost_initial = format!("{} + {}", dot_expr(l0.as_slice()), quad_expr(k0, &zero));
    let neg_lf: Vec<f64> = lf.iter().map(|v| -v).collect();
    file.cost_final = format!(
        "{} + {}",
        dot_expr(&neg_lf),
        quad_expr(kf, xf.as_slice())
    );
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commuting_fixture_builds_and_verifies() {
        let file = construct_fixture(FixtureRecipe::CommutingF1F2, 1).unwrap();
        assert_eq!(file.schedule.theta0.len(), 1);
        let loaded = file.validate().unwrap();
        assert_eq!(loaded.problem.m, 3);
    }

    #[test]
    fn degenerate_fixture_builds() {
        let file = construct_fixture(FixtureRecipe::DegenerateDtau, 2).unwrap();
        assert_eq!(file.fields[0], file.fields[1]);
    }

    #[test]
    fn abnormal_fixture_builds() {
        let file = construct_fixture(FixtureRecipe::Abnormal, 3).unwrap();
        assert_eq!(file.p0, 0);
        assert_eq!(file.manifold_initial.len(), 2);
        assert_eq!(file.manifold_final.len(), 2);
    }

    #[test]
    fn normal_generic_fixture_builds_with_noncommuting_double_switch() {
        let file = construct_fixture(FixtureRecipe::NormalGeneric, 4).unwrap();
        assert_eq!(file.dimension, 3);
        assert_eq!(file.schedule.theta0.len(), 1);
        assert_eq!(file.schedule.theta1.len(), 1);
        assert!(file.schedule.theta0[0] < file.schedule.tau);
        assert!(file.schedule.theta1[0] > file.schedule.tau);
    }
}
