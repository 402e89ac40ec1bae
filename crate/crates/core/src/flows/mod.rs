//! Reference flow, adjoint, switching functions and pulled-back arc fields.
//!
//! A [`ReferenceFlow`] is built once per extremal: it integrates the state,
//! the variational (transition-matrix) equation and the adjoint across the
//! switching schedule, storing arc boundary data so later queries integrate
//! only within one arc and never straddle a scheduled switch.
//!
//! The maximized flow of the pointwise-maximized Hamiltonian and the exact
//! gradients of its implicit switching-time functions live in [`maxflow`].

mod maxflow;

pub use maxflow::{MaximizedFlowState, SwitchingTimeGradients};

use crate::exprlang::{CompiledField, VectorFieldSpec};
use crate::geometry::{ControlAffineProblem, CotangentPoint};
use crate::ode::{integrate, OdeOptions};
use crate::{CoreError, Result};
use nalgebra::{DMatrix, DVector};

/// The switching structure of the reference control: `J0` simple switches,
/// one double switch at `tau`, `J1` simple switches after it, and the
/// constant control vector on each of the `J0 + J1 + 2` arcs.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingSchedule {
    pub theta0: Vec<f64>,
    pub tau: f64,
    pub theta1: Vec<f64>,
    /// One row per arc, `m` entries of ±1, in arc order
    /// `(0,0), …, (0,J0), (1,0), …, (1,J1)`.
    pub arc_controls: Vec<Vec<f64>>,
}

impl SwitchingSchedule {
    pub fn j0(&self) -> usize {
        self.theta0.len()
    }

    pub fn j1(&self) -> usize {
        self.theta1.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.j0() + self.j1() + 2
    }

    /// Arc boundary times `0, θ̂_01, …, θ̂_0J0, τ̂, θ̂_11, …, θ̂_1J1, T`.
    pub fn boundaries(&self, horizon: f64) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.num_arcs() + 1);
        b.push(0.0);
        b.extend_from_slice(&self.theta0);
        b.push(self.tau);
        b.extend_from_slice(&self.theta1);
        b.push(horizon);
        b
    }

    /// Start time of arc `(i, j)`; `θ̂_00 = 0`, `θ̂_10 = τ̂`.
    pub fn arc_start(&self, i: usize, j: usize) -> f64 {
        match (i, j) {
            (0, 0) => 0.0,
            (0, j) => self.theta0[j - 1],
            (1, 0) => self.tau,
            (1, j) => self.theta1[j - 1],
            _ => unreachable!(),
        }
    }

    /// Flat arc index of arc `(i, j)`.
    pub fn arc_index(&self, i: usize, j: usize) -> usize {
        if i == 0 {
            j
        } else {
            self.j0() + 1 + j
        }
    }

    /// The control component (0-based) flipping at the simple switch
    /// `(i, j)`, `j ≥ 1`, derived from the arc controls.
    pub fn switch_component(&self, i: usize, j: usize) -> Result<usize> {
        let prev = &self.arc_controls[self.arc_index(i, j - 1)];
        let next = &self.arc_controls[self.arc_index(i, j)];
        let flips: Vec<usize> = (0..prev.len()).filter(|&s| prev[s] != next[s]).collect();
        if flips.len() != 1 {
            return Err(CoreError::Invalid(format!(
                "arcs around simple switch ({i},{j}) differ in {} components",
                flips.len()
            )));
        }
        Ok(flips[0])
    }

    pub fn validate(&self, m: usize, horizon: f64) -> Result<()> {
        if self.arc_controls.len() != self.num_arcs() {
            return Err(CoreError::Invalid(format!(
                "expected {} arc control rows, got {}",
                self.num_arcs(),
                self.arc_controls.len()
            )));
        }
        for row in &self.arc_controls {
            if row.len() != m {
                return Err(CoreError::Invalid(
                    "arc control row length does not match the number of controls".into(),
                ));
            }
            if row.iter().any(|u| u.abs() != 1.0) {
                return Err(CoreError::Invalid(
                    "bang-bang controls must be ±1 in every component".into(),
                ));
            }
        }
        let b = self.boundaries(horizon);
        for w in b.windows(2) {
            if !(w[0] < w[1]) {
                return Err(CoreError::Invalid(format!(
                    "switching times must be strictly increasing inside (0, T): {} !< {}",
                    w[0], w[1]
                )));
            }
        }
        // Simple switches flip exactly one component.
        for j in 1..=self.j0() {
            self.switch_component(0, j)?;
        }
        for j in 1..=self.j1() {
            self.switch_component(1, j)?;
        }
        // The double switch flips exactly components 1 and 2, both -1 -> +1.
        if m < 2 {
            return Err(CoreError::Invalid(
                "a double switch requires at least two controls".into(),
            ));
        }
        let before = &self.arc_controls[self.j0()];
        let after = &self.arc_controls[self.j0() + 1];
        let flips: Vec<usize> = (0..m).filter(|&s| before[s] != after[s]).collect();
        if flips != [0, 1] {
            return Err(CoreError::Invalid(
                "the double switch must flip exactly control components 1 and 2".into(),
            ));
        }
        if !(before[0] == -1.0 && before[1] == -1.0 && after[0] == 1.0 && after[1] == 1.0) {
            return Err(CoreError::Invalid(
                "components 1 and 2 must both switch from -1 to +1 at the double switch".into(),
            ));
        }
        Ok(())
    }
}

/// Reference extremal data: initial state and covector, the abnormality
/// multiplier and the switching schedule.
#[derive(Debug, Clone)]
pub struct ReferenceExtremal {
    pub x0: DVector<f64>,
    pub lambda0: DVector<f64>,
    /// 0 (abnormal) or 1 (normal).
    pub p0: u8,
    pub schedule: SwitchingSchedule,
}

impl ReferenceExtremal {
    pub fn validate(&self, problem: &ControlAffineProblem) -> Result<()> {
        if self.x0.len() != problem.n || self.lambda0.len() != problem.n {
            return Err(CoreError::Dimension(
                "extremal point/covector dimension mismatch".into(),
            ));
        }
        if self.p0 > 1 {
            return Err(CoreError::Invalid("p0 must be 0 or 1".into()));
        }
        if self.p0 == 0 && self.lambda0.norm() == 0.0 {
            return Err(CoreError::Invalid(
                "PMP nontriviality: (p0, lambda0) must not vanish".into(),
            ));
        }
        self.schedule.validate(problem.m, problem.horizon)
    }

    pub fn lambda0_point(&self) -> CotangentPoint {
        CotangentPoint {
            p: self.lambda0.clone(),
            x: self.x0.clone(),
        }
    }
}

/// State, transition matrix and adjoint at one time along the reference.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub x: DVector<f64>,
    pub transition: DMatrix<f64>,
    pub p: DVector<f64>,
}

/// One arc of the reference flow with precompiled derivatives and the
/// boundary data at its start time.
#[derive(Debug, Clone)]
struct ArcData {
    spec: VectorFieldSpec,
    field: CompiledField,
    t_start: f64,
    t_end: f64,
    x_start: DVector<f64>,
    m_start: DMatrix<f64>,
    p_start: DVector<f64>,
}

/// Per-switch values of a switching function.
#[derive(Debug, Clone)]
pub struct SwitchTrace {
    /// `(i, j)` for simple switches.
    pub arc: (usize, usize),
    pub time: f64,
    /// 0-based control component flipping there.
    pub component: usize,
    /// `σ_s` at the switch (should vanish on a true extremal).
    pub value: f64,
    /// One-sided derivatives from three-point stencils inside the adjacent
    /// arcs.
    pub deriv_left: f64,
    pub deriv_right: f64,
}

/// Dense traces of all switching functions plus per-switch data.
#[derive(Debug, Clone)]
pub struct SwitchingFunctions {
    pub grid: Vec<f64>,
    /// `values[s][k] = σ_{s+1}(grid[k])`.
    pub values: Vec<Vec<f64>>,
    pub simple: Vec<SwitchTrace>,
    /// At the double switch: values and one-sided derivatives of `σ_1`, `σ_2`.
    pub double_value: [f64; 2],
    pub double_deriv_left: [f64; 2],
    pub double_deriv_right: [f64; 2],
}

/// A pulled-back field with its data frozen at `x̂_0`.
#[derive(Debug, Clone)]
pub struct PulledBackField {
    /// Pull-back time along the reference flow.
    pub theta: f64,
    /// The arc field (or `f_ν`) being pulled back.
    pub spec: VectorFieldSpec,
    pub value_at_x0: DVector<f64>,
    pub jac_at_x0: DMatrix<f64>,
    /// Hamiltonian vector field of the lift at `λ̂_0`, packed `(ṗ, ẋ)`.
    pub lift_at_lambda0: DVector<f64>,
}

/// All §2.1/§5 pull-backs: `g_ij` in flat arc order, `h_ν`, `f̃_ν`.
#[derive(Debug, Clone)]
pub struct PulledBackFields {
    pub n: usize,
    pub j0: usize,
    pub j1: usize,
    /// `g_00, …, g_0J0, g_10, …, g_1J1`.
    pub g: Vec<PulledBackField>,
    pub h: [PulledBackField; 2],
    pub ftilde: [PulledBackField; 2],
    pub lambda0: CotangentPoint,
}

impl PulledBackFields {
    pub fn g_at(&self, i: usize, j: usize) -> &PulledBackField {
        if i == 0 {
            &self.g[j]
        } else {
            &self.g[self.j0 + 1 + j]
        }
    }

    /// `⟨λ̂_0, [a, b](x̂_0)⟩` from the frozen values and Jacobians.
    pub fn bracket_pairing(&self, a: &PulledBackField, b: &PulledBackField) -> f64 {
        let br = &b.jac_at_x0 * &a.value_at_x0 - &a.jac_at_x0 * &b.value_at_x0;
        self.lambda0.p.dot(&br)
    }
}

/// The reference flow `Ŝ_t` with its variational equation and adjoint,
/// integrated once across the schedule.
pub struct ReferenceFlow {
    pub problem: ControlAffineProblem,
    pub extremal: ReferenceExtremal,
    pub opts: OdeOptions,
    arcs: Vec<ArcData>,
    /// Controlled fields compiled (for switching functions).
    controlled: Vec<CompiledField>,
    /// `k_ν = k_0J0 + 2 f_ν`.
    knu_spec: [VectorFieldSpec; 2],
    knu: [CompiledField; 2],
    /// Final data at `T`.
    x_final: DVector<f64>,
    m_final: DMatrix<f64>,
    p_final: DVector<f64>,
}

impl ReferenceFlow {
    pub fn new(
        problem: &ControlAffineProblem,
        extremal: &ReferenceExtremal,
        opts: OdeOptions,
    ) -> Result<Self> {
        problem.validate()?;
        extremal.validate(problem)?;
        let n = problem.n;
        let sched = &extremal.schedule;
        let boundaries = sched.boundaries(problem.horizon);

        let mut specs = Vec::with_capacity(sched.num_arcs());
        for row in &sched.arc_controls {
            specs.push(VectorFieldSpec::affine_combination(
                &problem.drift,
                &problem.controlled,
                row,
            )?);
        }

        let mut arcs: Vec<ArcData> = Vec::with_capacity(specs.len());
        let mut x = extremal.x0.clone();
        let mut m = DMatrix::identity(n, n);
        let mut p = extremal.lambda0.clone();
        for (a, spec) in specs.into_iter().enumerate() {
            let field = CompiledField::new(&spec);
            let t0 = boundaries[a];
            let t1 = boundaries[a + 1];
            arcs.push(ArcData {
                spec,
                field,
                t_start: t0,
                t_end: t1,
                x_start: x.clone(),
                m_start: m.clone(),
                p_start: p.clone(),
            });
            let y0 = pack_ref(&x, &m, &p);
            let fld = &arcs[a].field;
            let y1 = integrate(
                |_, y| ref_rhs(fld, y, n),
                0.0,
                t1 - t0,
                y0,
                &opts,
            )?;
            let (nx, nm, np) = unpack_ref(&y1, n);
            x = nx;
            m = nm;
            p = np;
        }
        check_transition(&m)?;

        let arc0j0 = &arcs[sched.j0()].spec;
        let knu_spec = [
            add_scaled(arc0j0, &problem.controlled[0], 2.0)?,
            add_scaled(arc0j0, &problem.controlled[1], 2.0)?,
        ];
        let knu = [
            CompiledField::new(&knu_spec[0]),
            CompiledField::new(&knu_spec[1]),
        ];
        let controlled = problem.controlled.iter().map(CompiledField::new).collect();

        Ok(ReferenceFlow {
            problem: problem.clone(),
            extremal: extremal.clone(),
            opts,
            arcs,
            controlled,
            knu_spec,
            knu,
            x_final: x,
            m_final: m,
            p_final: p,
        })
    }

    pub fn n(&self) -> usize {
        self.problem.n
    }

    pub fn j0(&self) -> usize {
        self.extremal.schedule.j0()
    }

    pub fn j1(&self) -> usize {
        self.extremal.schedule.j1()
    }

    pub fn horizon(&self) -> f64 {
        self.problem.horizon
    }

    /// Arc field spec by flat index.
    pub fn arc_spec(&self, idx: usize) -> &VectorFieldSpec {
        &self.arcs[idx].spec
    }

    /// Compiled arc field by flat index (for arc-aligned re-integration).
    pub fn arc_field(&self, idx: usize) -> &CompiledField {
        &self.arcs[idx].field
    }

    pub fn knu_spec(&self, nu: usize) -> &VectorFieldSpec {
        &self.knu_spec[nu - 1]
    }

    /// Compiled `k_ν` field.
    pub fn knu_field(&self, nu: usize) -> &CompiledField {
        &self.knu[nu - 1]
    }

    /// Final state `x̂_f = Ŝ_T(x̂_0)`.
    pub fn x_final(&self) -> &DVector<f64> {
        &self.x_final
    }

    /// Transition `Ŝ_{T*}` at `x̂_0`.
    pub fn m_final(&self) -> &DMatrix<f64> {
        &self.m_final
    }

    /// `λ̂(T)`.
    pub fn lambda_final(&self) -> &DVector<f64> {
        &self.p_final
    }

    fn arc_of_time(&self, t: f64) -> usize {
        // Boundary ties resolve to the earlier arc; state and adjoint are
        // continuous so the choice only matters for derivative queries,
        // which take explicit sides.
        let mut idx = 0;
        for (a, arc) in self.arcs.iter().enumerate() {
            if t > arc.t_start {
                idx = a;
            }
        }
        idx
    }

    /// State, transition and adjoint at `t ∈ [0, T]` along the reference.
    pub fn reference_at(&self, t: f64) -> Result<FlowResult> {
        if !(0.0..=self.horizon() + 1e-12).contains(&t) {
            return Err(CoreError::Invalid(format!(
                "time {t} outside [0, {}]",
                self.horizon()
            )));
        }
        let idx = self.arc_of_time(t);
        let arc = &self.arcs[idx];
        let n = self.n();
        let y0 = pack_ref(&arc.x_start, &arc.m_start, &arc.p_start);
        let fld = &arc.field;
        let y1 = integrate(|_, y| ref_rhs(fld, y, n), 0.0, t - arc.t_start, y0, &self.opts)?;
        let (x, m, p) = unpack_ref(&y1, n);
        check_transition(&m)?;
        Ok(FlowResult { x, transition: m, p })
    }

    /// `λ̂(t)` as a cotangent point.
    pub fn lambda_at(&self, t: f64) -> Result<CotangentPoint> {
        let r = self.reference_at(t)?;
        CotangentPoint::new(r.p, r.x)
    }

    /// Dense adjoint trace on a uniform grid.
    pub fn adjoint_trace(&self, points: usize) -> Result<Vec<(f64, CotangentPoint)>> {
        let mut out = Vec::with_capacity(points);
        for k in 0..points {
            let t = self.horizon() * k as f64 / (points - 1) as f64;
            out.push((t, self.lambda_at(t)?));
        }
        Ok(out)
    }

    /// Flow `Ŝ_t(x)` and its transition from an arbitrary initial point,
    /// aligned with the reference schedule.
    pub fn flow_from(&self, x: &DVector<f64>, t: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n();
        let mut xs = x.clone();
        let mut ms = DMatrix::identity(n, n);
        for arc in &self.arcs {
            if arc.t_start >= t {
                break;
            }
            let t1 = arc.t_end.min(t);
            let y0 = pack_state(&xs, &ms);
            let fld = &arc.field;
            let y1 = integrate(
                |_, y| state_rhs(fld, y, n),
                0.0,
                t1 - arc.t_start,
                y0,
                &self.opts,
            )?;
            let (nx, nm) = unpack_state(&y1, n);
            xs = nx;
            ms = nm;
            if t1 >= t {
                break;
            }
        }
        Ok((xs, ms))
    }

    /// Pull a field back to time 0 through the reference flow at `theta`:
    /// `g(x) = Ŝ_{θ*}(x)^{-1} k(Ŝ_θ(x))`.
    pub fn pull_back_value(
        &self,
        theta: f64,
        field: &VectorFieldSpec,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let (xt, mt) = self.flow_from(x, theta)?;
        check_transition(&mt)?;
        let v = field.eval(&xt)?;
        mt.lu()
            .solve(&v)
            .ok_or_else(|| CoreError::Integration("singular transition matrix".into()))
    }

    fn pull_back_field(&self, theta: f64, spec: &VectorFieldSpec) -> Result<PulledBackField> {
        let x0 = &self.extremal.x0;
        let n = self.n();
        let value = self.pull_back_value(theta, spec, x0)?;
        // Central differences of the pulled-back value; only first
        // derivatives of g at x̂_0 enter the second variation.
        let h = 1e-5 * (1.0 + x0.norm());
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[j] += h;
            xm[j] -= h;
            let vp = self.pull_back_value(theta, spec, &xp)?;
            let vm = self.pull_back_value(theta, spec, &xm)?;
            for i in 0..n {
                jac[(i, j)] = (vp[i] - vm[i]) / (2.0 * h);
            }
        }
        let p0 = &self.extremal.lambda0;
        let mut lift = DVector::zeros(2 * n);
        let pdot = -(jac.transpose() * p0);
        lift.rows_mut(0, n).copy_from(&pdot);
        lift.rows_mut(n, n).copy_from(&value);
        Ok(PulledBackField {
            theta,
            spec: spec.clone(),
            value_at_x0: value,
            jac_at_x0: jac,
            lift_at_lambda0: lift,
        })
    }

    /// All pulled-back fields of §2.1/§5 frozen at `x̂_0`.
    pub fn pull_back_fields(&self) -> Result<PulledBackFields> {
        let sched = &self.extremal.schedule;
        let mut g = Vec::with_capacity(sched.num_arcs());
        for j in 0..=self.j0() {
            let th = sched.arc_start(0, j);
            g.push(self.pull_back_field(th, &self.arcs[sched.arc_index(0, j)].spec.clone())?);
        }
        for j in 0..=self.j1() {
            let th = sched.arc_start(1, j);
            g.push(self.pull_back_field(th, &self.arcs[sched.arc_index(1, j)].spec.clone())?);
        }
        let tau = sched.tau;
        let h = [
            self.pull_back_field(tau, &self.knu_spec[0].clone())?,
            self.pull_back_field(tau, &self.knu_spec[1].clone())?,
        ];
        let ftilde = [
            self.pull_back_field(tau, &self.problem.controlled[0].clone())?,
            self.pull_back_field(tau, &self.problem.controlled[1].clone())?,
        ];
        Ok(PulledBackFields {
            n: self.n(),
            j0: self.j0(),
            j1: self.j1(),
            g,
            h,
            ftilde,
            lambda0: self.extremal.lambda0_point(),
        })
    }

    /// `σ_s(t) = ⟨λ̂(t), f_s(ξ̂(t))⟩` for one component (1-based `s`).
    pub fn sigma_at(&self, s: usize, t: f64) -> Result<f64> {
        let r = self.reference_at(t)?;
        Ok(r.p.dot(&self.controlled[s - 1].eval(&r.x)?))
    }

    /// Dense traces of every switching function plus values and one-sided
    /// derivatives at each switch.
    pub fn switching_functions(&self, grid_points: usize) -> Result<SwitchingFunctions> {
        let m = self.problem.m;
        let t_end = self.horizon();
        let grid: Vec<f64> = (0..grid_points)
            .map(|k| t_end * k as f64 / (grid_points - 1) as f64)
            .collect();
        let mut values = vec![Vec::with_capacity(grid.len()); m];
        for &t in &grid {
            let r = self.reference_at(t)?;
            for (s, row) in values.iter_mut().enumerate() {
                row.push(r.p.dot(&self.controlled[s].eval(&r.x)?));
            }
        }

        // Stencil width: well inside the adjacent arc.
        let sched = &self.extremal.schedule;
        let boundaries = sched.boundaries(t_end);
        let min_arc = boundaries
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let h = (1e-4 * t_end).min(min_arc / 8.0);
        let one_sided = |s: usize, t0: f64, side: f64| -> Result<f64> {
            let f0 = self.sigma_at(s, t0)?;
            let f1 = self.sigma_at(s, t0 + side * h)?;
            let f2 = self.sigma_at(s, t0 + 2.0 * side * h)?;
            Ok(side * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h))
        };

        let mut simple = Vec::new();
        for i in 0..2usize {
            let count = if i == 0 { self.j0() } else { self.j1() };
            for j in 1..=count {
                let t0 = sched.arc_start(i, j);
                let comp = sched.switch_component(i, j)?;
                simple.push(SwitchTrace {
                    arc: (i, j),
                    time: t0,
                    component: comp,
                    value: self.sigma_at(comp + 1, t0)?,
                    deriv_left: one_sided(comp + 1, t0, -1.0)?,
                    deriv_right: one_sided(comp + 1, t0, 1.0)?,
                });
            }
        }
        let tau = sched.tau;
        let double_value = [self.sigma_at(1, tau)?, self.sigma_at(2, tau)?];
        let double_deriv_left = [one_sided(1, tau, -1.0)?, one_sided(2, tau, -1.0)?];
        let double_deriv_right = [one_sided(1, tau, 1.0)?, one_sided(2, tau, 1.0)?];

        Ok(SwitchingFunctions {
            grid,
            values,
            simple,
            double_value,
            double_deriv_left,
            double_deriv_right,
        })
    }

    /// Integrate the lifted Hamiltonian system of an arbitrary compiled
    /// field from a packed `(p, x)` point over a time span.
    pub(crate) fn lifted_flow(
        &self,
        field: &CompiledField,
        l0: &DVector<f64>,
        span: f64,
    ) -> Result<DVector<f64>> {
        let n = self.n();
        integrate(|_, y| lifted_rhs(field, y, n), 0.0, span, l0.clone(), &self.opts)
    }
}

fn add_scaled(a: &VectorFieldSpec, b: &VectorFieldSpec, c: f64) -> Result<VectorFieldSpec> {
    use crate::exprlang::Expr;
    let comps = a
        .components
        .iter()
        .zip(&b.components)
        .map(|(x, y)| Expr::add(x.clone(), Expr::mul(Expr::num(c), y.clone())).fold())
        .collect();
    VectorFieldSpec::new(a.n, comps)
}

fn check_transition(m: &DMatrix<f64>) -> Result<()> {
    let det = m.clone().lu().determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(CoreError::Integration(format!(
            "transition matrix numerically singular (det = {det})"
        )));
    }
    Ok(())
}

fn pack_ref(x: &DVector<f64>, m: &DMatrix<f64>, p: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut y = DVector::zeros(2 * n + n * n);
    y.rows_mut(0, n).copy_from(x);
    for c in 0..n {
        y.rows_mut(n + c * n, n).copy_from(&m.column(c));
    }
    y.rows_mut(n + n * n, n).copy_from(p);
    y
}

fn unpack_ref(y: &DVector<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let x = y.rows(0, n).into_owned();
    let mut m = DMatrix::zeros(n, n);
    for c in 0..n {
        m.column_mut(c).copy_from(&y.rows(n + c * n, n));
    }
    let p = y.rows(n + n * n, n).into_owned();
    (x, m, p)
}

fn ref_rhs(field: &CompiledField, y: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    let (x, m, p) = unpack_ref(y, n);
    let v = field.eval(&x)?;
    let jac = field.jacobian(&x)?;
    let mdot = &jac * &m;
    let pdot = -(jac.transpose() * &p);
    Ok(pack_ref(&v, &mdot, &pdot))
}

fn pack_state(x: &DVector<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let n = x.len();
    let mut y = DVector::zeros(n + n * n);
    y.rows_mut(0, n).copy_from(x);
    for c in 0..n {
        y.rows_mut(n + c * n, n).copy_from(&m.column(c));
    }
    y
}

fn unpack_state(y: &DVector<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let x = y.rows(0, n).into_owned();
    let mut m = DMatrix::zeros(n, n);
    for c in 0..n {
        m.column_mut(c).copy_from(&y.rows(n + c * n, n));
    }
    (x, m)
}

fn state_rhs(field: &CompiledField, y: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    let (x, m) = unpack_state(y, n);
    let v = field.eval(&x)?;
    let jac = field.jacobian(&x)?;
    Ok(pack_state(&v, &(&jac * &m)))
}

/// Lifted Hamiltonian right-hand side on `(p, x)`: `ẋ = k(x)`,
/// `ṗ = −Dk(x)ᵀ p`.
pub(crate) fn lifted_rhs(field: &CompiledField, y: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    let p = y.rows(0, n).into_owned();
    let x = y.rows(n, n).into_owned();
    let v = field.eval(&x)?;
    let jac = field.jacobian(&x)?;
    let pdot = -(jac.transpose() * &p);
    let mut out = DVector::zeros(2 * n);
    out.rows_mut(0, n).copy_from(&pdot);
    out.rows_mut(n, n).copy_from(&v);
    Ok(out)
}

#[cfg(test)]
mod tests;
