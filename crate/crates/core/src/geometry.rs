//! Differential-geometric primitives in a single chart.
//!
//! Covectors are rows stored as `DVector` columns; the duality product is
//! the plain dot product. The symplectic pairing of two Hamiltonian lifts is
//! *defined* as `⟨p, [f, g](x)⟩`, the convention under which the bracket and
//! flow-derivative formulations of the Legendre conditions agree.

use crate::exprlang::{jacobian, Expr, VectorFieldSpec};
use crate::{CoreError, Result};
use nalgebra::DVector;

/// The full Mayer problem data: dynamics, endpoint costs, boundary
/// manifolds (as common zero sets of constraint expressions) and horizon.
#[derive(Debug, Clone)]
pub struct ControlAffineProblem {
    pub n: usize,
    pub m: usize,
    /// Drift field `f0`.
    pub drift: VectorFieldSpec,
    /// Controlled fields `f1..fm`.
    pub controlled: Vec<VectorFieldSpec>,
    /// Initial-point cost `c0`.
    pub cost_initial: Expr,
    /// Final-point cost `cf`.
    pub cost_final: Expr,
    /// Constraints cutting out the initial manifold; empty means the whole
    /// chart.
    pub manifold_initial: Vec<Expr>,
    /// Constraints cutting out the final manifold.
    pub manifold_final: Vec<Expr>,
    /// Horizon `T`.
    pub horizon: f64,
}

impl ControlAffineProblem {
    pub fn validate(&self) -> Result<()> {
        if self.drift.n != self.n {
            return Err(CoreError::Dimension("drift dimension mismatch".into()));
        }
        if self.controlled.len() != self.m {
            return Err(CoreError::Dimension(format!(
                "expected {} controlled fields, got {}",
                self.m,
                self.controlled.len()
            )));
        }
        for f in &self.controlled {
            if f.n != self.n {
                return Err(CoreError::Dimension(
                    "controlled field dimension mismatch".into(),
                ));
            }
        }
        for e in [&self.cost_initial, &self.cost_final]
            .into_iter()
            .chain(self.manifold_initial.iter())
            .chain(self.manifold_final.iter())
        {
            let mv = e.max_var();
            if mv > self.n {
                return Err(CoreError::VarOutOfRange {
                    index: mv,
                    dim: self.n,
                });
            }
        }
        if !(self.horizon > 0.0) {
            return Err(CoreError::Invalid("horizon must be positive".into()));
        }
        Ok(())
    }

    /// Gradient of a scalar expression at `x`, as a covector.
    pub fn gradient(e: &Expr, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = x.len();
        let mut g = DVector::zeros(n);
        for j in 1..=n {
            g[j - 1] = e.diff(j).eval(x.as_slice())?;
        }
        Ok(g)
    }

    /// Rows = gradients of the constraints at `x`. An empty constraint list
    /// yields a `0 × n` matrix (the whole chart).
    pub fn constraint_jacobian(
        constraints: &[Expr],
        x: &DVector<f64>,
    ) -> Result<nalgebra::DMatrix<f64>> {
        let n = x.len();
        let mut out = nalgebra::DMatrix::zeros(constraints.len(), n);
        for (r, c) in constraints.iter().enumerate() {
            for j in 1..=n {
                out[(r, j - 1)] = c.diff(j).eval(x.as_slice())?;
            }
        }
        Ok(out)
    }
}

/// A point of the cotangent bundle in coordinates `ℓ = (p, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CotangentPoint {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
}

impl CotangentPoint {
    pub fn new(p: DVector<f64>, x: DVector<f64>) -> Result<Self> {
        if p.len() != x.len() {
            return Err(CoreError::Dimension(
                "covector and point dimensions differ".into(),
            ));
        }
        if !(p.iter().all(|v| v.is_finite()) && x.iter().all(|v| v.is_finite())) {
            return Err(CoreError::Invalid("non-finite cotangent point".into()));
        }
        Ok(CotangentPoint { x, p })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Pack as `(p, x)` into a single `2n` vector, the layout used by the
    /// lifted integrator and by tangent vectors `δℓ`.
    pub fn to_vec(&self) -> DVector<f64> {
        let n = self.dim();
        let mut v = DVector::zeros(2 * n);
        v.rows_mut(0, n).copy_from(&self.p);
        v.rows_mut(n, n).copy_from(&self.x);
        v
    }

    pub fn from_vec(v: &DVector<f64>) -> Self {
        let n = v.len() / 2;
        CotangentPoint {
            p: v.rows(0, n).into_owned(),
            x: v.rows(n, n).into_owned(),
        }
    }
}

/// Lie bracket `[f, g](x) = Dg(x) f(x) − Df(x) g(x)`.
pub fn lie_bracket(
    f: &VectorFieldSpec,
    g: &VectorFieldSpec,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if f.n != g.n || f.n != x.len() {
        return Err(CoreError::Dimension("lie_bracket dimension mismatch".into()));
    }
    let fx = f.eval(x)?;
    let gx = g.eval(x)?;
    let df = jacobian(f, x)?;
    let dg = jacobian(g, x)?;
    Ok(&dg * &fx - &df * &gx)
}

/// Hamiltonian lift `F(ℓ) = ⟨p, f(x)⟩`.
pub fn hamiltonian_lift(f: &VectorFieldSpec, l: &CotangentPoint) -> Result<f64> {
    if f.n != l.dim() {
        return Err(CoreError::Dimension(
            "hamiltonian_lift dimension mismatch".into(),
        ));
    }
    Ok(l.p.dot(&f.eval(&l.x)?))
}

/// Hamiltonian vector field of the lift: `ẋ = f(x)`, `ṗ = −p·Df(x)`.
/// Returned as `(ṗ, ẋ)`.
pub fn hamiltonian_vector_field(
    f: &VectorFieldSpec,
    l: &CotangentPoint,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if f.n != l.dim() {
        return Err(CoreError::Dimension(
            "hamiltonian_vector_field dimension mismatch".into(),
        ));
    }
    let xdot = f.eval(&l.x)?;
    let df = jacobian(f, &l.x)?;
    let pdot = -(df.transpose() * &l.p);
    Ok((pdot, xdot))
}

/// Symplectic pairing of two Hamiltonian lifts, implemented as
/// `⟨p, [f, g](x)⟩` so that the equivalence with the Legendre bracket
/// formulations holds verbatim.
pub fn symplectic_pairing(
    f: &VectorFieldSpec,
    g: &VectorFieldSpec,
    l: &CotangentPoint,
) -> Result<f64> {
    Ok(l.p.dot(&lie_bracket(f, g, &l.x)?))
}

/// Canonical two-form on tangent vectors `δℓ = (δp, δx)` of the cotangent
/// bundle, oriented so that `σ(F⃗(ℓ), G⃗(ℓ)) = ⟨p, [f, g](x)⟩`:
/// `σ(δℓ₁, δℓ₂) = ⟨δp₁, δx₂⟩ − ⟨δp₂, δx₁⟩`.
pub fn sigma_form(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let n = a.len() / 2;
    let mut s = 0.0;
    for i in 0..n {
        s += a[i] * b[n + i] - b[i] * a[n + i];
    }
    s
}
