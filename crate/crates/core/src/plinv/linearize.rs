//! Piecewise linearizations of the projected maximized flow at every
//! switching time, in the coordinates `δx ↦ dα_* δx` of the Lagrangian
//! manifold, and the per-switch invertibility dispatch: glued-pair
//! determinant tests for simple switches before the double one, the
//! topological-degree certificate (or the Clarke-hull determinant test in
//! the degenerate case) at and after it.

use super::{
    hyperplane_pair_invertible, local_homeo_certificate, plm_degree, HomeoVerdict,
    PiecewiseLinearMap, PolyhedralCone,
};
use crate::flows::{PulledBackFields, ReferenceFlow, SwitchingTimeGradients};
use crate::geometry::{ControlAffineProblem, CotangentPoint};
use crate::secondvar::BoundaryPenalty;
use crate::{CoreError, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which switching time to linearize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchId {
    /// Simple switch `θ̂_0j`, `j = 1..J0`.
    Simple0(usize),
    /// The double switch `τ̂`.
    Double,
    /// Simple switch `θ̂_1j`, `j = 1..J1`.
    Simple1(usize),
}

/// Structural kind of the linearization at one switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchKind {
    /// Two half-spaces glued along a hyperplane (pre-double simple switch).
    SimplePair,
    /// The five-cone double-switch fan.
    DoubleFan,
    /// The four-cone post-double fan.
    PostFan,
}

/// The exact matrices and cone normals of one switch's piecewise
/// linearization, in `δx` coordinates of the Lagrangian manifold.
#[derive(Debug, Clone)]
pub struct SwitchMaps {
    pub id: SwitchId,
    pub kind: SwitchKind,
    pub label: String,
    pub switch_time: f64,
    /// `[A, B]`, `[L0, L11, L21, L12, L22]`, or `[A1, A2, B1, B2]`.
    pub matrices: Vec<DMatrix<f64>>,
    /// Half-space normals per matrix (may describe an empty-interior cone
    /// in degenerate configurations).
    pub cone_normals: Vec<Vec<DVector<f64>>>,
    /// The glue normal for pair dispatch (`dθ` composed with `dα_*`).
    pub pair_normal: Option<DVector<f64>>,
    /// `|d(τ1 − τ2)|_Λ| / |dτ1|_Λ|`, the degeneracy indicator.
    pub dtau_gap: f64,
}

impl SwitchMaps {
    /// Assemble the validated piecewise-linear map (generic fans only; a
    /// degenerate fan has empty-interior cones and must go through the
    /// Clarke-hull route instead).
    pub fn to_plm(&self, rng: &mut ChaCha8Rng) -> Result<PiecewiseLinearMap> {
        let dim = self.matrices[0].nrows();
        let mut pieces = Vec::new();
        for (m, normals) in self.matrices.iter().zip(&self.cone_normals) {
            pieces.push((
                PolyhedralCone::new(dim, normals.clone(), rng)?,
                m.clone(),
            ));
        }
        let plm = PiecewiseLinearMap::new(dim, pieces)?;
        plm.validate(rng)?;
        Ok(plm)
    }
}

/// `⟨grad, dα_* δx⟩` as an n-covector in `δx` coordinates.
fn lambda_coordinates(grad: &DVector<f64>, pen: &BoundaryPenalty) -> DVector<f64> {
    let n = grad.len() / 2;
    let gp = grad.rows(0, n).into_owned();
    let gx = grad.rows(n, n).into_owned();
    &pen.d2alpha * gp + gx
}

/// x-parts of `Δ dα_* e_i`, as an n×n matrix.
fn delta_x_block(delta: &DMatrix<f64>, pen: &BoundaryPenalty) -> DMatrix<f64> {
    let n = pen.d2alpha.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let dl = pen.dalpha_star(&e);
        let v = delta * dl;
        out.column_mut(i).copy_from(&v.rows(n, n));
    }
    out
}

/// Build the exact piecewise linearization of `π∘H` at one switching time.
pub fn build_switch_linearizations(
    rf: &ReferenceFlow,
    _pulled: &PulledBackFields,
    grads: &SwitchingTimeGradients,
    pen: &BoundaryPenalty,
    which: SwitchId,
) -> Result<SwitchMaps> {
    let sched = &rf.extremal.schedule;
    let j0 = rf.j0();

    let ctau = [
        lambda_coordinates(&grads.dtau[0], pen),
        lambda_coordinates(&grads.dtau[1], pen),
    ];
    let ctheta10 = [
        lambda_coordinates(&grads.dtheta10[0], pen),
        lambda_coordinates(&grads.dtheta10[1], pen),
    ];
    let dtau_gap = {
        let d = (&ctau[0] - &ctau[1]).norm();
        d / ctau[0].norm().max(1e-300)
    };

    match which {
        SwitchId::Simple0(j) => {
            if j == 0 || j > j0 {
                return Err(CoreError::Invalid(format!("no simple switch (0,{j})")));
            }
            let t = sched.theta0[j - 1];
            let m_t = rf.reference_at(t)?.transition;
            let a = &m_t * delta_x_block(&grads.delta0[j - 1], pen);
            let c = lambda_coordinates(&grads.dtheta0[j - 1], pen);
            let xt = rf.reference_at(t)?.x;
            let w = rf.arc_spec(sched.arc_index(0, j)).eval(&xt)?
                - rf.arc_spec(sched.arc_index(0, j - 1)).eval(&xt)?;
            let b = &a - &w * c.transpose();
            Ok(SwitchMaps {
                id: which,
                kind: SwitchKind::SimplePair,
                label: format!("theta_0{j}"),
                switch_time: t,
                matrices: vec![a, b],
                cone_normals: vec![vec![c.clone()], vec![-&c]],
                pair_normal: Some(c),
                dtau_gap,
            })
        }
        SwitchId::Double => {
            let tau = sched.tau;
            let m_tau = rf.reference_at(tau)?.transition;
            let l0 = &m_tau * delta_x_block(&grads.delta0[j0], pen);
            let x_tau = rf.reference_at(tau)?.x;
            let f1v = rf.problem.controlled[0].eval(&x_tau)?;
            let f2v = rf.problem.controlled[1].eval(&x_tau)?;

            let l11 = &l0 - 2.0 * &f1v * ctau[0].transpose();
            let l21 = &l0 - 2.0 * &f2v * ctau[1].transpose();
            let l12 = &l0 - 2.0 * &f2v * ctheta10[0].transpose() - 2.0 * &f1v * ctau[0].transpose();
            let l22 = &l0 - 2.0 * &f1v * ctheta10[1].transpose() - 2.0 * &f2v * ctau[1].transpose();

            let cone_normals = vec![
                // M0: dtau_1 >= 0, dtau_2 >= 0.
                vec![ctau[0].clone(), ctau[1].clone()],
                // M11: dtau_1 <= 0 <= dtheta10_1, dtau_1 <= dtau_2.
                vec![-&ctau[0], ctheta10[0].clone(), &ctau[1] - &ctau[0]],
                // M21.
                vec![-&ctau[1], ctheta10[1].clone(), &ctau[0] - &ctau[1]],
                // M12: dtau_1 <= dtheta10_1 <= 0, dtau_1 <= dtau_2.
                vec![
                    -&ctheta10[0],
                    &ctheta10[0] - &ctau[0],
                    &ctau[1] - &ctau[0],
                ],
                // M22.
                vec![
                    -&ctheta10[1],
                    &ctheta10[1] - &ctau[1],
                    &ctau[0] - &ctau[1],
                ],
            ];
            Ok(SwitchMaps {
                id: which,
                kind: SwitchKind::DoubleFan,
                label: "tau".into(),
                switch_time: tau,
                matrices: vec![l0, l11, l21, l12, l22],
                cone_normals,
                pair_normal: None,
                dtau_gap,
            })
        }
        SwitchId::Simple1(j) => {
            if j == 0 || j > rf.j1() {
                return Err(CoreError::Invalid(format!("no simple switch (1,{j})")));
            }
            let t = sched.theta1[j - 1];
            let m_t = rf.reference_at(t)?.transition;
            let a1 = &m_t * delta_x_block(&grads.delta1[0][j - 1], pen);
            let a2 = &m_t * delta_x_block(&grads.delta1[1][j - 1], pen);
            let c1 = lambda_coordinates(&grads.dtheta1[0][j - 1], pen);
            let c2 = lambda_coordinates(&grads.dtheta1[1][j - 1], pen);
            let xt = rf.reference_at(t)?.x;
            let w = rf.arc_spec(sched.arc_index(1, j)).eval(&xt)?
                - rf.arc_spec(sched.arc_index(1, j - 1)).eval(&xt)?;
            let b1 = &a1 - &w * c1.transpose();
            let b2 = &a2 - &w * c2.transpose();
            let diag1 = &ctau[1] - &ctau[0]; // dtau_1 <= dtau_2
            let diag2 = &ctau[0] - &ctau[1];
            let cone_normals = vec![
                vec![diag1.clone(), c1.clone()],
                vec![diag2.clone(), c2.clone()],
                vec![diag1.clone(), -&c1],
                vec![diag2.clone(), -&c2],
            ];
            Ok(SwitchMaps {
                id: which,
                kind: SwitchKind::PostFan,
                label: format!("theta_1{j}"),
                switch_time: t,
                matrices: vec![a1, a2, b1, b2],
                cone_normals,
                pair_normal: Some(c1),
                dtau_gap,
            })
        }
    }
}

/// Certification state of one sub-check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriState {
    Certified,
    Inconclusive,
    Failed,
}

/// Per-switch invertibility verdict.
#[derive(Debug, Clone)]
pub struct SwitchVerdict {
    pub label: String,
    pub route: String,
    pub state: TriState,
    /// Determinants of the pieces examined.
    pub determinants: Vec<f64>,
    pub notes: Vec<String>,
}

/// Aggregate report: invertible iff every switch certified; any
/// inconclusive sub-certificate makes the aggregate inconclusive.
#[derive(Debug, Clone)]
pub struct InvertibilityReport {
    pub switches: Vec<SwitchVerdict>,
    pub aggregate: TriState,
}

/// Aggregation rule, vacuously certified on an empty switch list.
pub fn aggregate_verdicts(switches: &[SwitchVerdict]) -> TriState {
    if switches.iter().any(|s| s.state == TriState::Failed) {
        TriState::Failed
    } else if switches.iter().any(|s| s.state == TriState::Inconclusive) {
        TriState::Inconclusive
    } else {
        TriState::Certified
    }
}

/// Controls for the invertibility dispatch.
#[derive(Debug, Clone, Copy)]
pub struct InvertibilityOptions {
    pub seed: u64,
    /// Relative `|d(τ1 − τ2)|` below which the Clarke-hull branch is taken.
    pub degenerate_rel_tol: f64,
    /// Base scale of the first-order-expansion probes of the nonlinear
    /// flow.
    pub expansion_scale: f64,
    /// Random hull samples in the degenerate determinant test.
    pub hull_samples: usize,
}

impl Default for InvertibilityOptions {
    fn default() -> Self {
        InvertibilityOptions {
            seed: 0x5eed,
            degenerate_rel_tol: 1e-8,
            expansion_scale: 1e-4,
            hull_samples: 20,
        }
    }
}

/// The covector section `x ↦ dα(x)` of the Lagrangian manifold.
fn lambda_section(
    rf: &ReferenceFlow,
    pen: &BoundaryPenalty,
    dx: &DVector<f64>,
) -> Result<CotangentPoint> {
    let x = &rf.extremal.x0 + dx;
    let p0 = f64::from(rf.extremal.p0);
    let dc0 = ControlAffineProblem::gradient(&rf.problem.cost_initial, &x)?;
    let p = p0 * dc0 + &pen.alpha_lin + &pen.alpha_extra * dx;
    CotangentPoint::new(p, x)
}

fn glued_pair_check(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    normal: &DVector<f64>,
    notes: &mut Vec<String>,
) -> Result<(TriState, Vec<f64>)> {
    let (inv, det_a, det_b) = hyperplane_pair_invertible(a, b, normal)?;
    let mut state = if inv { TriState::Certified } else { TriState::Failed };
    // Monotone-determinant check along the segment.
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let det_t = (a * t + b * (1.0 - t)).lu().determinant();
        if inv && det_a * det_t <= 0.0 {
            state = TriState::Failed;
            notes.push(format!("det(tA+(1-t)B) changes sign at t={t}"));
        }
    }
    notes.push(format!("det A = {det_a}, det B = {det_b}"));
    Ok((state, vec![det_a, det_b]))
}

/// Check every switching time of the maximized flow for local
/// invertibility of its projection, dispatching per the structure of the
/// switch and the degeneracy of `d(τ1 − τ2)` on the Lagrangian manifold.
pub fn flow_invertibility_check(
    rf: &ReferenceFlow,
    pulled: &PulledBackFields,
    grads: &SwitchingTimeGradients,
    pen: &BoundaryPenalty,
    opts: &InvertibilityOptions,
) -> Result<InvertibilityReport> {
    let mut switches = Vec::new();
    let mut switch_index = 0u64;

    for j in 1..=rf.j0() {
        switch_index += 1;
        let maps = build_switch_linearizations(rf, pulled, grads, pen, SwitchId::Simple0(j))?;
        let mut notes = Vec::new();
        let (state, determinants) = glued_pair_check(
            &maps.matrices[0],
            &maps.matrices[1],
            maps.pair_normal.as_ref().unwrap(),
            &mut notes,
        )?;
        switches.push(SwitchVerdict {
            label: maps.label,
            route: "glued-pair determinant test".into(),
            state,
            determinants,
            notes,
        });
    }

    // Double switch.
    {
        switch_index += 1;
        let maps = build_switch_linearizations(rf, pulled, grads, pen, SwitchId::Double)?;
        let mut notes = Vec::new();
        let degenerate = maps.dtau_gap < opts.degenerate_rel_tol;
        notes.push(format!("|d(tau1-tau2)|/|dtau1| = {}", maps.dtau_gap));
        if degenerate {
            let (state, determinants) =
                clarke_hull_check(&maps, opts, switch_index, &mut notes)?;
            switches.push(SwitchVerdict {
                label: maps.label.clone(),
                route: "Clarke-hull determinant test (degenerate dtau)".into(),
                state,
                determinants,
                notes,
            });
        } else {
            let (state, determinants) = double_fan_check(
                rf, pen, grads, &maps, opts, switch_index, &mut notes,
            )?;
            switches.push(SwitchVerdict {
                label: maps.label.clone(),
                route: "topological degree certificate (generic dtau)".into(),
                state,
                determinants,
                notes,
            });
        }
    }

    for j in 1..=rf.j1() {
        switch_index += 1;
        let maps = build_switch_linearizations(rf, pulled, grads, pen, SwitchId::Simple1(j))?;
        let mut notes = Vec::new();
        let degenerate = maps.dtau_gap < opts.degenerate_rel_tol;
        if degenerate {
            // The two branches coincide; the switch reduces to a glued pair.
            let a_gap = (&maps.matrices[0] - &maps.matrices[1]).amax();
            let b_gap = (&maps.matrices[2] - &maps.matrices[3]).amax();
            notes.push(format!(
                "degenerate branches: |A1-A2| = {a_gap}, |B1-B2| = {b_gap}"
            ));
            let scale = maps.matrices[0].amax().max(1.0);
            if a_gap > 1e-6 * scale || b_gap > 1e-6 * scale {
                return Err(CoreError::Invalid(format!(
                    "degenerate dtau but branch maps differ at {}",
                    maps.label
                )));
            }
            let (state, determinants) = glued_pair_check(
                &maps.matrices[0],
                &maps.matrices[2],
                maps.pair_normal.as_ref().unwrap(),
                &mut notes,
            )?;
            switches.push(SwitchVerdict {
                label: maps.label,
                route: "glued-pair determinant test (degenerate dtau)".into(),
                state,
                determinants,
                notes,
            });
        } else {
            let (state, determinants) = post_fan_check(
                rf, pen, grads, &maps, opts, switch_index, &mut notes,
            )?;
            switches.push(SwitchVerdict {
                label: maps.label,
                route: "topological degree certificate (generic dtau)".into(),
                state,
                determinants,
                notes,
            });
        }
    }

    let aggregate = aggregate_verdicts(&switches);
    Ok(InvertibilityReport { switches, aggregate })
}

/// Degenerate double switch: positivity of
/// `det (L0)^{-1} (t0 L0 + t1 L11 + t2 L21 + t3 L12 + t4 L22)` at the five
/// vertices and random hull points.
fn clarke_hull_check(
    maps: &SwitchMaps,
    opts: &InvertibilityOptions,
    switch_index: u64,
    notes: &mut Vec<String>,
) -> Result<(TriState, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(switch_index));
    let l0 = &maps.matrices[0];
    let inv_l0 = l0
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| CoreError::Invalid("L0 is singular".into()))?;

    let mut determinants = Vec::new();
    let mut state = TriState::Certified;
    for m in &maps.matrices {
        let det = (&inv_l0 * m).lu().determinant();
        determinants.push(det);
        if det <= 0.0 {
            state = TriState::Failed;
            notes.push(format!("vertex determinant {det} <= 0"));
        }
    }
    for _ in 0..opts.hull_samples {
        let mut w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = w.iter().sum();
        for wi in &mut w {
            *wi /= s;
        }
        let mut mix = DMatrix::zeros(l0.nrows(), l0.ncols());
        for (wi, m) in w.iter().zip(&maps.matrices) {
            mix += m * *wi;
        }
        let det = (&inv_l0 * mix).lu().determinant();
        if det <= 0.0 {
            state = TriState::Failed;
            notes.push(format!("hull determinant {det} <= 0 at weights {w:?}"));
        }
    }
    notes.push(format!(
        "five vertex determinants of (L0)^-1 L: {determinants:?}"
    ));
    Ok((state, determinants))
}

/// Generic double switch: assemble the five-cone fan, validate it, and run
/// the degree certificate with the diagonal probe against the nonlinear
/// projected flow.
#[allow(clippy::too_many_arguments)]
fn double_fan_check(
    rf: &ReferenceFlow,
    pen: &BoundaryPenalty,
    grads: &SwitchingTimeGradients,
    maps: &SwitchMaps,
    opts: &InvertibilityOptions,
    switch_index: u64,
    notes: &mut Vec<String>,
) -> Result<(TriState, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(switch_index));
    let plm = maps.to_plm(&mut rng)?;
    let determinants: Vec<f64> = plm
        .pieces
        .iter()
        .map(|(_, m)| m.clone().lu().determinant())
        .collect();
    if determinants.iter().any(|d| *d <= 0.0) {
        notes.push(format!("non-positive piece determinant: {determinants:?}"));
        return Ok((TriState::Failed, determinants));
    }

    // Diagonal probe: <dtau1, dl> = <dtau2, dl> > 0 maps through L0.
    let ctau1 = lambda_coordinates(&grads.dtau[0], pen);
    let ctau2 = lambda_coordinates(&grads.dtau[1], pen);
    let probe = diagonal_probe(&ctau1, &ctau2).map(|dlb| &maps.matrices[0] * dlb);
    let probes: Vec<DVector<f64>> = probe.into_iter().collect();

    let x_tau = rf.reference_at(maps.switch_time)?.x;
    let f = |dx: &DVector<f64>| -> Result<DVector<f64>> {
        let l = lambda_section(rf, pen, dx)?;
        let (ht, _) = rf.maximized_flow(&l, maps.switch_time)?;
        Ok(ht.x - &x_tau)
    };
    match local_homeo_certificate(
        f,
        &DVector::zeros(rf.n()),
        &plm,
        &probes,
        opts.expansion_scale,
        opts.seed.wrapping_add(1000 + switch_index),
    )? {
        HomeoVerdict::Certified { .. } => {
            notes.push("degree 1 via singleton-preimage probe".into());
            let deg = plm_degree(&plm, opts.seed.wrapping_add(2000 + switch_index))?;
            notes.push(format!("plm_degree = {deg}"));
            Ok((TriState::Certified, determinants))
        }
        HomeoVerdict::Inconclusive { reason } => {
            notes.push(reason);
            Ok((TriState::Inconclusive, determinants))
        }
    }
}

/// Generic post-double simple switch: four-cone fan plus the diagonal
/// probe through `A1`.
#[allow(clippy::too_many_arguments)]
fn post_fan_check(
    rf: &ReferenceFlow,
    pen: &BoundaryPenalty,
    grads: &SwitchingTimeGradients,
    maps: &SwitchMaps,
    opts: &InvertibilityOptions,
    switch_index: u64,
    notes: &mut Vec<String>,
) -> Result<(TriState, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(switch_index));
    let plm = maps.to_plm(&mut rng)?;
    let determinants: Vec<f64> = plm
        .pieces
        .iter()
        .map(|(_, m)| m.clone().lu().determinant())
        .collect();
    if determinants.iter().any(|d| *d <= 0.0) {
        notes.push(format!("non-positive piece determinant: {determinants:?}"));
        return Ok((TriState::Failed, determinants));
    }

    let ctau1 = lambda_coordinates(&grads.dtau[0], pen);
    let ctau2 = lambda_coordinates(&grads.dtau[1], pen);
    let probes: Vec<DVector<f64>> = diagonal_probe(&ctau1, &ctau2)
        .map(|dlb| &maps.matrices[0] * dlb)
        .into_iter()
        .collect();

    let x_t = rf.reference_at(maps.switch_time)?.x;
    let f = |dx: &DVector<f64>| -> Result<DVector<f64>> {
        let l = lambda_section(rf, pen, dx)?;
        let (ht, _) = rf.maximized_flow(&l, maps.switch_time)?;
        Ok(ht.x - &x_t)
    };
    match local_homeo_certificate(
        f,
        &DVector::zeros(rf.n()),
        &plm,
        &probes,
        opts.expansion_scale,
        opts.seed.wrapping_add(3000 + switch_index),
    )? {
        HomeoVerdict::Certified { .. } => {
            notes.push("degree 1 via singleton-preimage probe".into());
            Ok((TriState::Certified, determinants))
        }
        HomeoVerdict::Inconclusive { reason } => {
            notes.push(reason);
            Ok((TriState::Inconclusive, determinants))
        }
    }
}

/// A direction with `⟨c1, δx⟩ = ⟨c2, δx⟩ > 0`, when one exists.
fn diagonal_probe(c1: &DVector<f64>, c2: &DVector<f64>) -> Option<DVector<f64>> {
    let n = c1.len();
    let diff = c1 - c2;
    let mut row = DMatrix::zeros(1, n);
    row.row_mut(0).copy_from(&diff.transpose());
    let basis = crate::secondvar::nullspace(&row);
    for c in 0..basis.ncols() {
        let v = basis.column(c).into_owned();
        let val = c1.dot(&v);
        if val.abs() > 1e-10 * c1.norm().max(1e-300) {
            return Some(if val > 0.0 { v } else { -v });
        }
    }
    None
}
