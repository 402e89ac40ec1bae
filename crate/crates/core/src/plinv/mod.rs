//! Piecewise-linear maps on polyhedral cone fans: orientation tests, the
//! determinant-convexity identity, topological degree by preimage
//! enumeration, and the local-homeomorphism certificate for piecewise-C¹
//! maps, plus the per-switch linearizations of the projected maximized flow
//! and the aggregate invertibility verdict.
//!
//! All random probes draw from a caller-seeded generator so certificates
//! replay bit-for-bit.

mod linearize;


pub use linearize::{
    aggregate_verdicts, build_switch_linearizations, flow_invertibility_check, InvertibilityOptions,
    InvertibilityReport, SwitchId, SwitchKind, SwitchMaps, SwitchVerdict, TriState,
};

use crate::{CoreError, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Membership tolerance on normalized normals.
const CONE_TOL: f64 = 1e-12;

/// A closed polyhedral cone `{x : ⟨v_k, x⟩ ≥ 0}` with nonempty interior;
/// a strictly interior point is found at construction and stored.
#[derive(Debug, Clone)]
pub struct PolyhedralCone {
    pub dim: usize,
    /// Unit-normalized half-space normals. Zero normals (trivial
    /// constraints) are dropped at construction.
    pub normals: Vec<DVector<f64>>,
    pub interior_point: DVector<f64>,
}

impl PolyhedralCone {
    pub fn new(dim: usize, raw_normals: Vec<DVector<f64>>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut normals = Vec::new();
        for v in raw_normals {
            if v.len() != dim {
                return Err(CoreError::Dimension("cone normal dimension mismatch".into()));
            }
            let norm = v.norm();
            if norm > 1e-14 {
                normals.push(v / norm);
            }
        }
        let interior_point = find_interior(dim, &normals, rng)?;
        Ok(PolyhedralCone {
            dim,
            normals,
            interior_point,
        })
    }

    /// Closed membership with the scaled tolerance.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        let scale = x.norm().max(1e-300);
        self.normals.iter().all(|v| v.dot(x) >= -CONE_TOL * scale)
    }

    /// Strict membership with margin `eps * |x|`.
    pub fn strictly_contains(&self, x: &DVector<f64>, eps: f64) -> bool {
        let scale = x.norm().max(1e-300);
        self.normals.iter().all(|v| v.dot(x) > eps * scale)
    }

    /// Smallest constraint margin at `x` (normalized by `|x|`).
    pub fn margin(&self, x: &DVector<f64>) -> f64 {
        let scale = x.norm().max(1e-300);
        self.normals
            .iter()
            .map(|v| v.dot(x) / scale)
            .fold(f64::INFINITY, f64::min)
    }
}

fn find_interior(dim: usize, normals: &[DVector<f64>], rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    if normals.is_empty() {
        let mut e = DVector::zeros(dim);
        e[0] = 1.0;
        return Ok(e);
    }
    // Perceptron-style search; converges whenever the interior is nonempty.
    let mut x: DVector<f64> = normals.iter().sum();
    if x.norm() < 1e-12 {
        x = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
    }
    for _ in 0..20_000 {
        x /= x.norm().max(1e-300);
        let (mut worst, mut worst_v) = (f64::INFINITY, None);
        for v in normals {
            let m = v.dot(&x);
            if m < worst {
                worst = m;
                worst_v = Some(v);
            }
        }
        if worst > 1e-7 {
            return Ok(x);
        }
        x += worst_v.unwrap() * 1.0;
        // Occasional restart keeps the iteration off cycling orbits.
        if rng.gen_bool(0.02) {
            x += DVector::from_fn(dim, |_, _| rng.gen_range(-0.1..0.1));
        }
    }
    Err(CoreError::Invalid(
        "polyhedral cone has (numerically) empty interior".into(),
    ))
}

/// A continuous piecewise-linear map: a fan of cones with one matrix per
/// cone.
#[derive(Debug, Clone)]
pub struct PiecewiseLinearMap {
    pub dim: usize,
    pub pieces: Vec<(PolyhedralCone, DMatrix<f64>)>,
}

impl PiecewiseLinearMap {
    pub fn new(dim: usize, pieces: Vec<(PolyhedralCone, DMatrix<f64>)>) -> Result<Self> {
        for (c, m) in &pieces {
            if c.dim != dim || m.nrows() != dim || m.ncols() != dim {
                return Err(CoreError::Dimension("piece dimension mismatch".into()));
            }
        }
        Ok(PiecewiseLinearMap { dim, pieces })
    }

    /// Evaluate at `x` using the first cone containing it.
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        for (c, m) in &self.pieces {
            if c.contains(x) {
                return Ok(m * x);
            }
        }
        Err(CoreError::Invalid(format!(
            "point outside every cone of the fan: {x:?}"
        )))
    }

    /// Validate the fan: 1000 random directions land in at least one cone,
    /// and adjacent pieces agree on 50 sampled shared-facet points each.
    pub fn validate(&self, rng: &mut ChaCha8Rng) -> Result<()> {
        for _ in 0..1000 {
            let x = DVector::from_fn(self.dim, |_, _| rng.gen_range(-1.0f64..1.0));
            if x.norm() < 1e-9 {
                continue;
            }
            if !self.pieces.iter().any(|(c, _)| c.contains(&x)) {
                return Err(CoreError::Invalid(format!(
                    "fan does not cover direction {x:?}"
                )));
            }
        }
        for i in 0..self.pieces.len() {
            for j in i + 1..self.pieces.len() {
                let samples = self.facet_samples(i, j, 50, rng);
                for x in &samples {
                    let (li, lj) = (&self.pieces[i].1, &self.pieces[j].1);
                    let (yi, yj) = (li * x, lj * x);
                    let scale = yi.norm().max(yj.norm()).max(1.0);
                    if (yi - yj).norm() > 1e-10 * scale {
                        return Err(CoreError::Invalid(format!(
                            "pieces {i} and {j} disagree on shared facet point {x:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Sample points of the shared facet of pieces `i` and `j` by bisecting
    /// segments between interior points. Non-adjacent pairs yield nothing.
    fn facet_samples(
        &self,
        i: usize,
        j: usize,
        want: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<DVector<f64>> {
        let ci = &self.pieces[i].0;
        let cj = &self.pieces[j].0;
        let mut out = Vec::new();
        'outer: for _ in 0..want * 4 {
            if out.len() >= want {
                break;
            }
            // Random interior representatives of both cones.
            let mut a = ci.interior_point.clone();
            let mut b = cj.interior_point.clone();
            for _ in 0..8 {
                let da = DVector::from_fn(self.dim, |_, _| rng.gen_range(-0.4f64..0.4));
                if ci.strictly_contains(&(&a + &da), 1e-9) {
                    a += da;
                }
                let db = DVector::from_fn(self.dim, |_, _| rng.gen_range(-0.4f64..0.4));
                if cj.strictly_contains(&(&b + &db), 1e-9) {
                    b += db;
                }
            }
            // Walk from a toward b until leaving cone i.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            if ci.contains(&b) {
                // Overlapping cones (degenerate fans): the midpoint already
                // lies in both.
                let x = 0.5 * (&a + &b);
                if cj.contains(&x) {
                    out.push(x);
                }
                continue 'outer;
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let x = &a * (1.0 - mid) + &b * mid;
                if ci.contains(&x) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let x = &a * (1.0 - lo) + &b * lo;
            if ci.contains(&x) && cj.contains(&x) && x.norm() > 1e-9 {
                out.push(x);
            }
        }
        out
    }
}

/// The glued-pair criterion: `x ↦ Ax` on `⟨v, x⟩ ≥ 0`, `x ↦ Bx` on
/// `⟨v, x⟩ ≤ 0`, with `A = B` on the hyperplane. Homeomorphism iff
/// `det A · det B > 0`. Returns `(invertible, det A, det B)`.
pub fn hyperplane_pair_invertible(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<(bool, f64, f64)> {
    check_pair_agreement(a, b, v)?;
    let det_a = a.clone().lu().determinant();
    let det_b = b.clone().lu().determinant();
    Ok((det_a * det_b > 0.0, det_a, det_b))
}

fn check_pair_agreement(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &DVector<f64>) -> Result<()> {
    let n = v.len();
    if v.norm() < 1e-300 {
        return Err(CoreError::Precondition("zero normal".into()));
    }
    let mut row = DMatrix::zeros(1, n);
    row.row_mut(0).copy_from(&v.transpose());
    let basis = crate::secondvar::nullspace(&row);
    let scale = a.amax().max(b.amax()).max(1.0);
    for c in 0..basis.ncols() {
        let w = basis.column(c).into_owned();
        if ((a - b) * &w).norm() > 1e-10 * scale {
            return Err(CoreError::Precondition(
                "matrices disagree on the hyperplane".into(),
            ));
        }
    }
    Ok(())
}

/// Residual of the determinant-convexity identity
/// `det(tA + (1−t)B) = t det A + (1−t) det B` for pairs agreeing on a
/// hyperplane.
pub fn det_convex_identity(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    v: &DVector<f64>,
    t: f64,
) -> Result<f64> {
    check_pair_agreement(a, b, v)?;
    let det_a = a.clone().lu().determinant();
    let det_b = b.clone().lu().determinant();
    let mix = (a * t + b * (1.0 - t)).lu().determinant();
    Ok((mix - t * det_a - (1.0 - t) * det_b).abs())
}

/// Topological degree of a continuous piecewise-linear map by preimage
/// enumeration at a regular value probed inside the image of the first
/// cone. Mixed orientations are rejected (the fan assumption of the degree
/// argument); all determinants must be nonzero.
pub fn plm_degree(g: &PiecewiseLinearMap, seed: u64) -> Result<i32> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dets: Vec<f64> = g
        .pieces
        .iter()
        .map(|(_, m)| m.clone().lu().determinant())
        .collect();
    if dets.iter().any(|d| d.abs() < 1e-12) {
        return Err(CoreError::Precondition(
            "a piece of the fan is numerically singular".into(),
        ));
    }
    if dets.iter().any(|d| *d > 0.0) && dets.iter().any(|d| *d < 0.0) {
        return Err(CoreError::Precondition(
            "mixed orientations across the fan".into(),
        ));
    }

    let first = &g.pieces[0];
    'probe: for _ in 0..100 {
        // Random strictly interior point of S1, mapped through L1.
        let mut z = first.0.interior_point.clone();
        for _ in 0..6 {
            let dz = DVector::from_fn(g.dim, |_, _| rng.gen_range(-0.3f64..0.3));
            if first.0.strictly_contains(&(&z + &dz), 1e-6) {
                z += dz;
            }
        }
        let x = &first.1 * &z;

        let mut degree = 0i32;
        for (k, (cone, m)) in g.pieces.iter().enumerate() {
            let y = match m.clone().lu().solve(&x) {
                Some(y) => y,
                None => continue 'probe,
            };
            let margin = cone.margin(&y);
            if margin.abs() < 1e-9 && !cone.normals.is_empty() {
                // Probe lands on the image of a facet: retry.
                continue 'probe;
            }
            if margin > 0.0 {
                degree += dets[k].signum() as i32;
            }
        }
        return Ok(degree);
    }
    Err(CoreError::ProbeExhausted(
        "no regular probe value found in 100 attempts".into(),
    ))
}

/// Outcome of the local-homeomorphism certificate.
#[derive(Debug, Clone)]
pub enum HomeoVerdict {
    /// Degree 1 established through a probe with a singleton preimage in at
    /// most two cones.
    Certified {
        probe: DVector<f64>,
        preimage: DVector<f64>,
    },
    /// No qualifying probe; explicitly not a failure verdict.
    Inconclusive { reason: String },
}

/// Certify that a piecewise-C¹ map is a local homeomorphism at `x0` from
/// its piecewise-linear B-derivative `f_lin`: all orientations positive,
/// the first-order expansion residual decays, and some probe value has a
/// singleton preimage touching at most two cones.
///
/// `preferred_probes` are tried first (the flow checks pass the image of a
/// diagonal direction); generated probes follow.
pub fn local_homeo_certificate<F>(
    f: F,
    x0: &DVector<f64>,
    f_lin: &PiecewiseLinearMap,
    preferred_probes: &[DVector<f64>],
    expansion_scale: f64,
    seed: u64,
) -> Result<HomeoVerdict>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = f_lin.dim;

    for (_, m) in &f_lin.pieces {
        let det = m.clone().lu().determinant();
        if det <= 0.0 {
            return Err(CoreError::Precondition(format!(
                "piece with non-positive determinant {det}"
            )));
        }
    }

    // Validate the B-derivative by the decay of the first-order residual.
    let y0 = f(x0)?;
    let dirs: Vec<DVector<f64>> = (0..12)
        .map(|_| {
            let mut u = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0f64..1.0));
            u /= u.norm().max(1e-300);
            u
        })
        .collect();
    let resid = |h: f64| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for u in &dirs {
            let y = f(&(x0 + u * h))?;
            let lin = f_lin.eval(&(u * h))?;
            worst = worst.max((y - &y0 - lin).norm() / h);
        }
        Ok(worst)
    };
    let r1 = resid(expansion_scale)?;
    let r2 = resid(expansion_scale / 4.0)?;
    let r3 = resid(expansion_scale / 16.0)?;
    let scale = f_lin
        .pieces
        .iter()
        .map(|(_, m)| m.amax())
        .fold(1.0f64, f64::max);
    if !(r3 <= 0.5 * r1 + 1e-9 * scale && r2 <= r1 + 1e-9 * scale) {
        return Err(CoreError::Precondition(format!(
            "first-order expansion residual does not decay: {r1} -> {r2} -> {r3}"
        )));
    }

    // Probe search.
    let mut candidates: Vec<DVector<f64>> = preferred_probes.to_vec();
    for (cone, m) in &f_lin.pieces {
        candidates.push(m * &cone.interior_point);
        for _ in 0..4 {
            let mut z = cone.interior_point.clone();
            let dz = DVector::from_fn(dim, |_, _| rng.gen_range(-0.3f64..0.3));
            if cone.strictly_contains(&(&z + &dz), 1e-6) {
                z += dz;
            }
            candidates.push(m * &z);
        }
    }

    for q in &candidates {
        if q.norm() < 1e-12 {
            continue;
        }
        let mut points: Vec<DVector<f64>> = Vec::new();
        let mut cones_touched = 0usize;
        let mut solvable = true;
        for (cone, m) in &f_lin.pieces {
            let y = match m.clone().lu().solve(q) {
                Some(y) => y,
                None => {
                    solvable = false;
                    break;
                }
            };
            if cone.contains(&y) {
                cones_touched += 1;
                let dup = points
                    .iter()
                    .any(|p| (p - &y).norm() <= 1e-8 * y.norm().max(1.0));
                if !dup {
                    points.push(y);
                }
            }
        }
        if !solvable {
            continue;
        }
        if points.len() == 1 && cones_touched <= 2 {
            return Ok(HomeoVerdict::Certified {
                probe: q.clone(),
                preimage: points.pop().unwrap(),
            });
        }
    }
    Ok(HomeoVerdict::Inconclusive {
        reason: "no probe value with a singleton preimage in at most two cones".into(),
    })
}
