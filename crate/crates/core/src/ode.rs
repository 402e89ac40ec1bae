//! Adaptive explicit Runge–Kutta integration (Dormand–Prince 5(4)).
//!
//! Callers integrate arc by arc so that steps never straddle a scheduled
//! switch; this module only deals with a single smooth right-hand side.
//! Negative spans integrate backwards.

use crate::{CoreError, Result};
use nalgebra::DVector;

/// Integration controls. Defaults follow the certification pipeline:
/// `rtol = atol = 1e-12`, generous step budget, and a state-norm guard that
/// flags blow-up instead of grinding the step size down.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub max_norm: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-12,
            atol: 1e-12,
            max_steps: 1_000_000,
            max_norm: 1e9,
        }
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [
    1.0 / 5.0,
    3.0 / 10.0,
    4.0 / 5.0,
    8.0 / 9.0,
    1.0,
    1.0,
];
// 5th-order weights coincide with the last A row (FSAL); these are the
// differences b5 - b4 used for the embedded error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate `y' = rhs(t, y)` from `t0` to `t1` (either direction) and
/// return `y(t1)`.
pub fn integrate<F>(mut rhs: F, t0: f64, t1: f64, y0: DVector<f64>, opts: &OdeOptions) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y0);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0;
    let mut h = (span.abs() / 16.0).min(0.1).max(1e-8) * dir;
    let mut k1 = rhs(t, &y)?;
    let mut steps = 0usize;
    let hmin = span.abs() * 1e-15 + f64::MIN_POSITIVE;

    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > opts.max_steps {
            return Err(CoreError::Integration(format!(
                "step budget exhausted at t = {t}"
            )));
        }
        let mut last = false;
        if (t + h - t1) * dir >= 0.0 {
            h = t1 - t;
            last = true;
        }
        if h.abs() < hmin {
            if last {
                // Remaining span is below resolution; we are done.
                return Ok(y);
            }
            return Err(CoreError::Integration(format!(
                "step underflow at t = {t}"
            )));
        }

        let mut k = Vec::with_capacity(7);
        k.push(k1.clone());
        let mut failed = false;
        for s in 0..6 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = A[s][j];
                if a != 0.0 {
                    ys.axpy(h * a, kj, 1.0);
                }
            }
            match rhs(t + C[s] * h, &ys) {
                Ok(v) => k.push(v),
                Err(_) => {
                    // The stage left the domain; shrink and retry. Step
                    // underflow at the loop head reports persistent failure.
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            h *= 0.5;
            continue;
        }

        // 5th-order solution is stage 7's base point (FSAL).
        let mut y5 = y.clone();
        for (j, kj) in k[..6].iter().enumerate() {
            let a = A[5][j];
            if a != 0.0 {
                y5.axpy(h * a, kj, 1.0);
            }
        }
        // Embedded error estimate.
        let mut err_vec = DVector::zeros(y.len());
        for (j, kj) in k.iter().enumerate() {
            if E[j] != 0.0 {
                err_vec.axpy(h * E[j], kj, 1.0);
            }
        }
        let mut err: f64 = 0.0;
        for i in 0..y.len() {
            let sc = opts.atol + opts.rtol * y[i].abs().max(y5[i].abs());
            let r = err_vec[i] / sc;
            err += r * r;
        }
        err = (err / y.len() as f64).sqrt();

        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            y = y5;
            if y.norm() > opts.max_norm {
                return Err(CoreError::Integration(format!(
                    "state norm exceeded {} at t = {t}",
                    opts.max_norm
                )));
            }
            k1 = k[6].clone();
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h *= fac;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_exponential_decay() {
        let y = integrate(
            |_, y| Ok(-y.clone()),
            0.0,
            2.0,
            DVector::from_vec(vec![1.0]),
            &OdeOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(y[0], (-2.0f64).exp(), epsilon = 1e-11);
    }

    #[test]
    fn integrates_backwards() {
        // y' = y from t=1 back to t=0 with y(1) = e gives y(0) = 1.
        let y = integrate(
            |_, y| Ok(y.clone()),
            1.0,
            0.0,
            DVector::from_vec(vec![std::f64::consts::E]),
            &OdeOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(y[0], 1.0, epsilon = 1e-11);
    }

    #[test]
    fn harmonic_oscillator_period() {
        let y = integrate(
            |_, y| Ok(DVector::from_vec(vec![y[1], -y[0]])),
            0.0,
            2.0 * std::f64::consts::PI,
            DVector::from_vec(vec![1.0, 0.0]),
            &OdeOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(y[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(y[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn reports_blow_up() {
        let r = integrate(
            |_, y| Ok(y.map(|v| v * v)),
            0.0,
            2.0,
            DVector::from_vec(vec![1.0]),
            &OdeOptions {
                max_norm: 1e6,
                ..OdeOptions::default()
            },
        );
        assert!(r.is_err());
    }
}
