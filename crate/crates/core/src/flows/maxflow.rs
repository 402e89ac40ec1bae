//! The maximized flow: switching-time resolution by safeguarded Newton on
//! the implicit switching equations, the piecewise flow value, and the
//! exact gradient recursion for the switching times at `λ̂_0`.

use super::{lifted_rhs, PulledBackFields, ReferenceFlow};
use crate::exprlang::CompiledField;
use crate::geometry::CotangentPoint;
use crate::ode::integrate;
use crate::{CoreError, Result};
use nalgebra::{DMatrix, DVector};

/// Absolute tolerance (in time) of the switching-time root solves.
const ROOT_TOL: f64 = 1e-12;

/// Resolved switching data for one query covector `ℓ` near `λ̂_0`.
#[derive(Debug, Clone)]
pub struct MaximizedFlowState {
    /// `θ_0j(ℓ)`, `j = 1..J0`.
    pub theta0: Vec<f64>,
    /// `τ_1(ℓ), τ_2(ℓ)`.
    pub tau: [f64; 2],
    /// `θ_{0,J0+1}(ℓ) = min τ_ν(ℓ)`.
    pub theta_0_last: f64,
    /// `θ^ν_10(ℓ)` for both ν.
    pub theta10_nu: [f64; 2],
    /// Selected `θ_10(ℓ)`.
    pub theta10: f64,
    /// Branch: 1 if `τ_1(ℓ) ≤ τ_2(ℓ)`, else 2.
    pub nu: usize,
    /// `θ^ν_1j(ℓ)` for both branches, `j = 1..J1`.
    pub theta1_nu: [Vec<f64>; 2],
    /// Selected-branch `θ_1j(ℓ)`.
    pub theta1: Vec<f64>,
    /// `φ_0j(ℓ)`, `j = 0..J0`, packed `(p, x)`.
    pub phi0: Vec<DVector<f64>>,
    /// `φ^ν_{0,J0+1}(ℓ)`.
    pub phi_after_double: [DVector<f64>; 2],
    /// `φ^ν_10(ℓ)`.
    pub phi10: [DVector<f64>; 2],
    /// `φ^ν_1j(ℓ)`, `j = 1..J1`.
    pub phi1: [Vec<DVector<f64>>; 2],
}

impl MaximizedFlowState {
    /// The ordered switching sequence of the selected branch, including the
    /// decoupled double switch.
    pub fn ordered_times(&self) -> Vec<f64> {
        let mut v = self.theta0.clone();
        v.push(self.theta_0_last);
        v.push(self.theta10);
        v.extend_from_slice(&self.theta1);
        v
    }
}

/// Exact gradients of the switching-time functions at `λ̂_0` and the
/// endomorphisms of the induction, all in packed `(p, x)` coordinates.
#[derive(Debug, Clone)]
pub struct SwitchingTimeGradients {
    pub n: usize,
    /// `dθ_0j(λ̂_0)`, `j = 1..J0`, acting on `δℓ` by dot product.
    pub dtheta0: Vec<DVector<f64>>,
    /// `dτ_ν(λ̂_0)`.
    pub dtau: [DVector<f64>; 2],
    /// `dθ^ν_10(λ̂_0)`.
    pub dtheta10: [DVector<f64>; 2],
    /// `dθ^ν_1j(λ̂_0)`, `j = 1..J1`.
    pub dtheta1: [Vec<DVector<f64>>; 2],
    /// `Δ_0j`, `j = 0..J0`.
    pub delta0: Vec<DMatrix<f64>>,
    /// `Δ^ν_1j`, `j = 0..J1`.
    pub delta1: [Vec<DMatrix<f64>>; 2],
    /// `σ(G⃗_{0,j-1}, G⃗_0j)(λ̂_0)`, `j = 1..J0` (Legendre denominators).
    pub pair_g0: Vec<f64>,
    /// `σ(G⃗_0J0, H⃗_ν)(λ̂_0)`.
    pub pair_g0j0_h: [f64; 2],
    /// `σ(H⃗_ν, G⃗_10)(λ̂_0)`.
    pub pair_h_g10: [f64; 2],
    /// `σ(G⃗_{1,j-1}, G⃗_1j)(λ̂_0)`, `j = 1..J1`.
    pub pair_g1: Vec<f64>,
    /// Relative residual of the two routes to `dθ^ν_10`.
    pub tautheta_residual: [f64; 2],
}

/// `J w = (w_x, −w_p)` so that `σ(u, w) = u · Jw`.
pub(crate) fn sigma_j(w: &DVector<f64>) -> DVector<f64> {
    let n = w.len() / 2;
    let mut out = DVector::zeros(2 * n);
    for i in 0..n {
        out[i] = w[n + i];
        out[n + i] = -w[i];
    }
    out
}

impl ReferenceFlow {
    /// Residual and time-derivative of the switching equation
    /// `Φ(t) = (K_next − K_cur)(exp(t K⃗_cur)(base))`, together with the
    /// flow point at `t`.
    fn switch_eq(
        &self,
        cur: &CompiledField,
        next: &CompiledField,
        base: &DVector<f64>,
        t: f64,
    ) -> Result<(f64, f64, DVector<f64>)> {
        let n = self.n();
        let l = integrate(
            |_, y| lifted_rhs(cur, y, n),
            0.0,
            t,
            base.clone(),
            &self.opts,
        )?;
        let p = l.rows(0, n).into_owned();
        let x = l.rows(n, n).into_owned();
        let vc = cur.eval(&x)?;
        let vn = next.eval(&x)?;
        let phi = p.dot(&vn) - p.dot(&vc);
        // Φ'(t) = ⟨p, [k_cur, k_next](x)⟩.
        let jc = cur.jacobian(&x)?;
        let jn = next.jacobian(&x)?;
        let bracket = &jn * &vc - &jc * &vn;
        Ok((phi, p.dot(&bracket), l))
    }

    /// Safeguarded Newton (bisection fallback) for the switching equation,
    /// seeded at the reference switching time.
    fn solve_switch_time(
        &self,
        cur: &CompiledField,
        next: &CompiledField,
        base: &DVector<f64>,
        seed: f64,
        lo: f64,
        hi: f64,
        label: &str,
    ) -> Result<(f64, DVector<f64>)> {
        let mut t = seed.clamp(lo, hi);
        // Sign bracket (t_neg, t_pos) with Φ(t_neg) < 0 < Φ(t_pos).
        let mut bracket: Option<(f64, f64)> = None;
        let mut prev: Option<(f64, f64)> = None;
        for _ in 0..60 {
            let (phi, dphi, l) = self.switch_eq(cur, next, base, t)?;
            if phi == 0.0 {
                return Ok((t, l));
            }
            if let Some((tp, php)) = prev {
                if php.signum() != phi.signum() && bracket.is_none() {
                    bracket = Some(if php < 0.0 { (tp, t) } else { (t, tp) });
                }
            }
            prev = Some((t, phi));
            if dphi.abs() < 1e-14 {
                break;
            }
            let t_new = t - phi / dphi;
            if !t_new.is_finite() || t_new < lo || t_new > hi {
                break;
            }
            if (t_new - t).abs() < ROOT_TOL {
                let (_, _, l) = self.switch_eq(cur, next, base, t_new)?;
                return Ok((t_new, l));
            }
            t = t_new;
        }
        // Bisection fallback.
        let (mut a, mut b) = match bracket {
            Some(br) => br,
            None => {
                let (fa, _, la) = self.switch_eq(cur, next, base, lo)?;
                if fa == 0.0 {
                    return Ok((lo, la));
                }
                let (fb, _, lb) = self.switch_eq(cur, next, base, hi)?;
                if fb == 0.0 {
                    return Ok((hi, lb));
                }
                if fa.signum() == fb.signum() {
                    return Err(CoreError::RootSolve(format!(
                        "{label}: no sign change in [{lo}, {hi}] (covector outside the validity neighborhood)"
                    )));
                }
                if fa < 0.0 {
                    (lo, hi)
                } else {
                    (hi, lo)
                }
            }
        };
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let (fm, _, l) = self.switch_eq(cur, next, base, mid)?;
            if (b - a).abs() < ROOT_TOL || fm == 0.0 {
                return Ok((mid, l));
            }
            if fm < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        Err(CoreError::RootSolve(format!(
            "{label}: bisection did not converge"
        )))
    }

    /// Flow the lifted system backwards: `exp(−t K⃗)(ℓ)`.
    fn unwind(&self, field: &CompiledField, l: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.lifted_flow(field, l, -t)
    }

    /// Resolve all implicit switching times of the maximized flow at `ℓ`.
    pub fn resolve_switch_times(&self, l: &CotangentPoint) -> Result<MaximizedFlowState> {
        let sched = &self.extremal.schedule;
        let j0 = self.j0();
        let j1 = self.j1();
        let boundaries = sched.boundaries(self.horizon());

        // Window half-widths: stay well inside the adjacent reference arcs.
        let window = |k: usize| -> (f64, f64) {
            let t = boundaries[k];
            let lo = t - 0.45 * (boundaries[k] - boundaries[k - 1]);
            let hi = t + 0.45 * (boundaries[k + 1] - boundaries[k]);
            (lo, hi)
        };

        let mut phi0 = vec![l.to_vec()];
        let mut theta0 = Vec::with_capacity(j0);
        for j in 1..=j0 {
            let cur = self.arc_field(j - 1);
            let next = self.arc_field(j);
            let (lo, hi) = window(j);
            let (t, l_sw) = self.solve_switch_time(
                cur,
                next,
                &phi0[j - 1],
                sched.theta0[j - 1],
                lo,
                hi,
                &format!("theta_0{j}"),
            )?;
            theta0.push(t);
            phi0.push(self.unwind(next, &l_sw, t)?);
        }

        // Double switch: decouple into the two candidate orders.
        let k0j0 = self.arc_field(j0);
        let k10 = self.arc_field(j0 + 1);
        let (lo_tau, hi_tau) = window(j0 + 1);
        let mut tau = [0.0; 2];
        let mut phi_after_double = [DVector::zeros(0), DVector::zeros(0)];
        let mut theta10_nu = [0.0; 2];
        let mut phi10 = [DVector::zeros(0), DVector::zeros(0)];
        for nu in 1..=2usize {
            let knu = self.knu_field(nu);
            let (t_nu, l_sw) = self.solve_switch_time(
                k0j0,
                knu,
                &phi0[j0],
                sched.tau,
                lo_tau,
                hi_tau,
                &format!("tau_{nu}"),
            )?;
            tau[nu - 1] = t_nu;
            let phi_nu = self.unwind(knu, &l_sw, t_nu)?;
            let (t10, l10) = self.solve_switch_time(
                knu,
                k10,
                &phi_nu,
                sched.tau,
                lo_tau,
                hi_tau,
                &format!("theta_10 (branch {nu})"),
            )?;
            theta10_nu[nu - 1] = t10;
            phi10[nu - 1] = self.unwind(k10, &l10, t10)?;
            phi_after_double[nu - 1] = phi_nu;
        }
        let nu = if tau[0] <= tau[1] { 1 } else { 2 };
        let theta_0_last = tau[0].min(tau[1]);
        let theta10 = theta10_nu[nu - 1];

        let mut theta1_nu: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut phi1: [Vec<DVector<f64>>; 2] = [Vec::new(), Vec::new()];
        for b in 0..2usize {
            let mut phi_prev = phi10[b].clone();
            for j in 1..=j1 {
                let cur = self.arc_field(j0 + j);
                let next = self.arc_field(j0 + 1 + j);
                let (lo, hi) = window(j0 + 1 + j);
                let (t, l_sw) = self.solve_switch_time(
                    cur,
                    next,
                    &phi_prev,
                    sched.theta1[j - 1],
                    lo,
                    hi,
                    &format!("theta_1{j} (branch {})", b + 1),
                )?;
                theta1_nu[b].push(t);
                phi_prev = self.unwind(next, &l_sw, t)?;
                phi1[b].push(phi_prev.clone());
            }
        }
        let theta1 = theta1_nu[nu - 1].clone();

        let state = MaximizedFlowState {
            theta0,
            tau,
            theta_0_last,
            theta10_nu,
            theta10,
            nu,
            theta1_nu,
            theta1,
            phi0,
            phi_after_double,
            phi10,
            phi1,
        };
        self.check_ordering(&state)?;
        Ok(state)
    }

    fn check_ordering(&self, s: &MaximizedFlowState) -> Result<()> {
        let mut chain: Vec<(String, f64)> = vec![("0".into(), 0.0)];
        for (j, t) in s.theta0.iter().enumerate() {
            chain.push((format!("theta_0{}", j + 1), *t));
        }
        chain.push(("theta_0,J0+1".into(), s.theta_0_last));
        for w in chain.windows(2) {
            if !(w[0].1 < w[1].1) {
                return Err(CoreError::Ordering(format!(
                    "{} = {} !< {} = {}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        if s.theta10 < s.theta_0_last - 1e-12 {
            return Err(CoreError::Ordering(format!(
                "theta_10 = {} < theta_0,J0+1 = {}",
                s.theta10, s.theta_0_last
            )));
        }
        let mut tail: Vec<(String, f64)> = vec![("theta_10".into(), s.theta10)];
        for (j, t) in s.theta1.iter().enumerate() {
            tail.push((format!("theta_1{}", j + 1), *t));
        }
        tail.push(("T".into(), self.horizon()));
        for w in tail.windows(2) {
            if !(w[0].1 < w[1].1) {
                return Err(CoreError::Ordering(format!(
                    "{} = {} !< {} = {}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(())
    }

    /// Value of the maximized flow `H_t(ℓ)` with the resolved switching
    /// state. The flow follows `K_00, …, K_0J0, K_ν, K_10, …, K_1J1` with
    /// the branch ν chosen by the order of `τ_1(ℓ), τ_2(ℓ)`.
    pub fn maximized_flow(
        &self,
        l: &CotangentPoint,
        t: f64,
    ) -> Result<(CotangentPoint, MaximizedFlowState)> {
        if !(0.0..=self.horizon() + 1e-12).contains(&t) {
            return Err(CoreError::Invalid(format!(
                "time {t} outside [0, {}]",
                self.horizon()
            )));
        }
        let state = self.resolve_switch_times(l)?;
        let j0 = self.j0();
        let nu = state.nu;

        // Locate the interval (piece boundaries of the resolved flow).
        let mut times = vec![0.0];
        times.extend_from_slice(&state.theta0);
        times.push(state.theta_0_last);
        times.push(state.theta10);
        times.extend_from_slice(&state.theta1);
        times.push(self.horizon());

        // Piece k covers (times[k], times[k+1]]: pieces 0..=j0 are the 0j
        // arcs, piece j0+1 is the inserted k_nu arc, the rest are 1j arcs.
        let mut piece = 0;
        for (k, w) in times.windows(2).enumerate() {
            if t > w[0] {
                piece = k;
            }
        }
        let (field, base): (&CompiledField, &DVector<f64>) = if piece <= j0 {
            (self.arc_field(piece), &state.phi0[piece])
        } else if piece == j0 + 1 {
            (self.knu_field(nu), &state.phi_after_double[nu - 1])
        } else if piece == j0 + 2 {
            (self.arc_field(j0 + 1), &state.phi10[nu - 1])
        } else {
            let j = piece - (j0 + 2);
            (self.arc_field(j0 + 1 + j), &state.phi1[nu - 1][j - 1])
        };
        let lv = self.lifted_flow(field, base, t)?;
        Ok((CotangentPoint::from_vec(&lv), state))
    }

    /// The §4 induction: exact gradients of every switching-time function at
    /// `λ̂_0` and the associated endomorphisms, from the pulled-back lifts.
    pub fn switching_time_gradients(
        &self,
        pulled: &PulledBackFields,
    ) -> Result<SwitchingTimeGradients> {
        let n = self.n();
        let dim = 2 * n;
        let j0 = self.j0();
        let j1 = self.j1();
        let gvec =
            |i: usize, j: usize| -> &DVector<f64> { &pulled.g_at(i, j).lift_at_lambda0 };
        let hvec = |nu: usize| -> &DVector<f64> { &pulled.h[nu - 1].lift_at_lambda0 };

        let denom_check = |d: f64, what: &str| -> Result<f64> {
            if d.abs() < 1e-12 * (1.0 + pulled.lambda0.p.norm()) {
                Err(CoreError::ZeroDenominator(format!(
                    "{what} = {d} (Legendre condition violated)"
                )))
            } else {
                Ok(d)
            }
        };
        let sigma = |a: &DVector<f64>, b: &DVector<f64>| crate::geometry::sigma_form(a, b);

        let mut delta0: Vec<DMatrix<f64>> = vec![DMatrix::identity(dim, dim)];
        let mut dtheta0: Vec<DVector<f64>> = Vec::with_capacity(j0);
        let mut pair_g0 = Vec::with_capacity(j0);
        for j in 1..=j0 {
            let w: DVector<f64> = gvec(0, j) - gvec(0, j - 1);
            let d = denom_check(
                sigma(gvec(0, j - 1), gvec(0, j)),
                &format!("sigma(G_0{},G_0{})", j - 1, j),
            )?;
            pair_g0.push(d);
            let grad: DVector<f64> = delta0[j - 1].transpose() * sigma_j(&w) / (-d);
            let next: DMatrix<f64> = &delta0[j - 1] - &w * grad.transpose();
            delta0.push(next);
            dtheta0.push(grad);
        }

        let d0j0 = &delta0[j0];
        let mut dtau = [DVector::zeros(dim), DVector::zeros(dim)];
        let mut dtheta10 = [DVector::zeros(dim), DVector::zeros(dim)];
        let mut pair_g0j0_h = [0.0; 2];
        let mut pair_h_g10 = [0.0; 2];
        let mut delta1: [Vec<DMatrix<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut dtheta1: [Vec<DVector<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut pair_g1 = Vec::new();
        for nu in 1..=2usize {
            let wh: DVector<f64> = hvec(nu) - gvec(0, j0);
            let dh = denom_check(
                sigma(gvec(0, j0), hvec(nu)),
                &format!("sigma(G_0J0,H_{nu})"),
            )?;
            pair_g0j0_h[nu - 1] = dh;
            dtau[nu - 1] = d0j0.transpose() * sigma_j(&wh) / (-dh);

            let mid: DMatrix<f64> = d0j0 - &wh * dtau[nu - 1].transpose();
            let w10: DVector<f64> = gvec(1, 0) - hvec(nu);
            let d10 = denom_check(
                sigma(hvec(nu), gvec(1, 0)),
                &format!("sigma(H_{nu},G_10)"),
            )?;
            pair_h_g10[nu - 1] = d10;
            dtheta10[nu - 1] = mid.transpose() * sigma_j(&w10) / (-d10);

            let mut d: DMatrix<f64> = &mid - &w10 * dtheta10[nu - 1].transpose();
            delta1[nu - 1].push(d.clone());
            for j in 1..=j1 {
                let w: DVector<f64> = gvec(1, j) - gvec(1, j - 1);
                let den = denom_check(
                    sigma(gvec(1, j - 1), gvec(1, j)),
                    &format!("sigma(G_1{},G_1{})", j - 1, j),
                )?;
                if nu == 1 {
                    pair_g1.push(den);
                }
                let grad: DVector<f64> = d.transpose() * sigma_j(&w) / (-den);
                d = &d - &w * grad.transpose();
                delta1[nu - 1].push(d.clone());
                dtheta1[nu - 1].push(grad);
            }
        }

        // eq:tautheta cross-check, both branches.
        let mut tautheta_residual = [0.0; 2];
        for nu in 1..=2usize {
            let other = 3 - nu;
            let ratio = sigma(gvec(0, j0), hvec(other)) / pair_h_g10[nu - 1];
            let alt = &dtau[nu - 1] - (&dtau[nu - 1] - &dtau[other - 1]) * ratio;
            let scale = dtheta10[nu - 1].norm().max(1e-300);
            tautheta_residual[nu - 1] = (&dtheta10[nu - 1] - alt).norm() / scale;
        }

        Ok(SwitchingTimeGradients {
            n,
            dtheta0,
            dtau,
            dtheta10,
            dtheta1,
            delta0,
            delta1,
            pair_g0,
            pair_g0j0_h,
            pair_h_g10,
            pair_g1,
            tautheta_residual,
        })
    }

    /// Largest radius of the form `r0 · 2^{-k}` at which a probe sample of
    /// covectors resolves with all §4 orderings intact.
    pub fn probe_validity_radius(
        &self,
        r0: f64,
        samples: usize,
        seed: u64,
    ) -> Result<f64> {
        use rand::Rng;
        use rand::SeedableRng;
        let n = self.n();
        let mut r = r0;
        'outer: for _ in 0..48 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..samples {
                let mut dl = DVector::zeros(2 * n);
                for i in 0..2 * n {
                    dl[i] = rng.gen_range(-1.0..1.0);
                }
                if dl.norm() == 0.0 {
                    continue;
                }
                dl *= r / dl.norm();
                let l = CotangentPoint {
                    p: &self.extremal.lambda0 + dl.rows(0, n).into_owned(),
                    x: &self.extremal.x0 + dl.rows(n, n).into_owned(),
                };
                if self.resolve_switch_times(&l).is_err() {
                    r *= 0.5;
                    continue 'outer;
                }
            }
            return Ok(r);
        }
        Err(CoreError::ProbeExhausted(
            "no validity radius found down to r0 * 2^-48".into(),
        ))
    }
}
