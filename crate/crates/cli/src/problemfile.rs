//! Problem-file schema and validation.
//!
//! Problems are structured text (TOML): dimensions, the dynamics and cost
//! expressions in the surface grammar, the boundary manifolds as constraint
//! expressions, the reference extremal data and the switching schedule,
//! plus optional tolerance/seed overrides.

use anyhow::{bail, Context, Result};
use bbcert::conditions::ConditionThresholds;
use bbcert::exprlang::{parse_expr, VectorFieldSpec};
use bbcert::flows::{ReferenceExtremal, SwitchingSchedule};
use bbcert::geometry::ControlAffineProblem;
use bbcert::ode::OdeOptions;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub dimension: usize,
    pub controls: usize,
    pub horizon: f64,
    pub drift: Vec<String>,
    pub fields: Vec<Vec<String>>,
    pub cost_initial: String,
    pub cost_final: String,
    #[serde(default)]
    pub manifold_initial: Vec<String>,
    #[serde(default)]
    pub manifold_final: Vec<String>,
    pub x0: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub p0: u8,
    pub schedule: ScheduleFile,
    #[serde(default)]
    pub options: OptionsFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleFile {
    #[serde(default)]
    pub theta0: Vec<f64>,
    pub tau: f64,
    #[serde(default)]
    pub theta1: Vec<f64>,
    pub arc_controls: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptionsFile {
    /// Integrator tolerances (both relative and absolute default 1e-12).
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    /// Condition thresholds.
    pub margin_scale: Option<f64>,
    pub residual_scale: Option<f64>,
    /// Coercivity threshold scale.
    pub coercivity_scale: Option<f64>,
    /// RNG seed for probes and the oracle.
    pub seed: Option<u64>,
    /// Oracle perturbation radius.
    pub radius: Option<f64>,
    /// Oracle sample count.
    pub samples: Option<usize>,
    /// Extra initial-penalty Hessian (row-major), the D²α override.
    pub d2alpha: Option<Vec<Vec<f64>>>,
}

/// Fully validated problem data plus resolved run options.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub problem: ControlAffineProblem,
    pub extremal: ReferenceExtremal,
    pub ode: OdeOptions,
    pub thresholds: ConditionThresholds,
    pub coercivity_scale: f64,
    pub seed: u64,
    pub radius: f64,
    pub samples: usize,
    pub d2alpha: Option<DMatrix<f64>>,
}

pub fn load_problem(path: &Path) -> Result<LoadedProblem> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading problem file {}", path.display()))?;
    load_problem_str(&text).with_context(|| format!("in problem file {}", path.display()))
}

pub fn load_problem_str(text: &str) -> Result<LoadedProblem> {
    let file: ProblemFile = toml::from_str(text).context("parsing problem file")?;
    file.validate()
}

impl ProblemFile {
    pub fn validate(&self) -> Result<LoadedProblem> {
        let n = self.dimension;
        let m = self.controls;
        if n == 0 {
            bail!("dimension: must be positive");
        }
        if m < 2 {
            bail!("controls: a double switch requires at least two controls (m >= 2)");
        }
        if self.drift.len() != n {
            bail!("drift: expected {n} component expressions, found {}", self.drift.len());
        }
        if self.fields.len() != m {
            bail!("fields: expected {m} field entries, found {}", self.fields.len());
        }

        let parse_field = |name: &str, comps: &[String]| -> Result<VectorFieldSpec> {
            if comps.len() != n {
                bail!("{name}: expected {n} components, found {}", comps.len());
            }
            let exprs = comps
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    parse_expr(s, n).with_context(|| format!("{name}[{i}] = `{s}`"))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VectorFieldSpec::new(n, exprs)?)
        };

        let drift = parse_field("drift", &self.drift)?;
        let controlled = self
            .fields
            .iter()
            .enumerate()
            .map(|(s, comps)| parse_field(&format!("fields[{s}]"), comps))
            .collect::<Result<Vec<_>>>()?;

        let cost_initial = parse_expr(&self.cost_initial, n)
            .with_context(|| format!("cost_initial = `{}`", self.cost_initial))?;
        let cost_final = parse_expr(&self.cost_final, n)
            .with_context(|| format!("cost_final = `{}`", self.cost_final))?;
        let manifold_initial = self
            .manifold_initial
            .iter()
            .enumerate()
            .map(|(i, s)| {
                parse_expr(s, n).with_context(|| format!("manifold_initial[{i}] = `{s}`"))
            })
            .collect::<Result<Vec<_>>>()?;
        let manifold_final = self
            .manifold_final
            .iter()
            .enumerate()
            .map(|(i, s)| {
                parse_expr(s, n).with_context(|| format!("manifold_final[{i}] = `{s}`"))
            })
            .collect::<Result<Vec<_>>>()?;

        let problem = ControlAffineProblem {
            n,
            m,
            drift,
            controlled,
            cost_initial,
            cost_final,
            manifold_initial,
            manifold_final,
            horizon: self.horizon,
        };
        problem.validate().context("problem data")?;

        if self.x0.len() != n {
            bail!("x0: expected {n} entries");
        }
        if self.lambda0.len() != n {
            bail!("lambda0: expected {n} entries");
        }
        let extremal = ReferenceExtremal {
            x0: DVector::from_vec(self.x0.clone()),
            lambda0: DVector::from_vec(self.lambda0.clone()),
            p0: self.p0,
            schedule: SwitchingSchedule {
                theta0: self.schedule.theta0.clone(),
                tau: self.schedule.tau,
                theta1: self.schedule.theta1.clone(),
                arc_controls: self.schedule.arc_controls.clone(),
            },
        };
        extremal
            .validate(&problem)
            .context("schedule/extremal data")?;

        // Submanifold regularity at both endpoints (the final point needs a
        // forward integration and is checked by the pipeline; the initial
        // one is immediate).
        let j0 = ControlAffineProblem::constraint_jacobian(
            &problem.manifold_initial,
            &extremal.x0,
        )?;
        bbcert::conditions::tangent_basis(&j0, n).context("manifold_initial rank")?;

        let d2alpha = match &self.options.d2alpha {
            None => None,
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    bail!("options.d2alpha: expected an {n}x{n} matrix");
                }
                let mut m = DMatrix::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                Some(m)
            }
        };

        let mut ode = OdeOptions::default();
        if let Some(r) = self.options.rtol {
            ode.rtol = r;
        }
        if let Some(a) = self.options.atol {
            ode.atol = a;
        }
        let mut thresholds = ConditionThresholds::default();
        if let Some(v) = self.options.margin_scale {
            thresholds.margin_scale = v;
        }
        if let Some(v) = self.options.residual_scale {
            thresholds.residual_scale = v;
        }

        Ok(LoadedProblem {
            problem,
            extremal,
            ode,
            thresholds,
            coercivity_scale: self.options.coercivity_scale.unwrap_or(1e-6),
            seed: self.options.seed.unwrap_or(0x5eed),
            radius: self.options.radius.unwrap_or(1e-2),
            samples: self.options.samples.unwrap_or(2000),
            d2alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_file(tau: f64) -> String {
        format!(
            r#"
dimension = 2
controls = 2
horizon = 1.0
drift = ["1", "0"]
fields = [["0", "x1-0.5"], ["0", "2*(x1-0.5)"]]
cost_initial = "x2"
cost_final = "-x2"
x0 = [0.0, 0.0]
lambda0 = [0.0, 1.0]
p0 = 1

[schedule]
tau = {tau}
arc_controls = [[-1.0, -1.0], [1.0, 1.0]]
"#
        )
    }

    #[test]
    fn loads_minimal_double_switch_file() {
        let loaded = load_problem_str(&minimal_file(0.5)).unwrap();
        assert_eq!(loaded.problem.n, 2);
        assert_eq!(loaded.extremal.schedule.j0(), 0);
        assert_eq!(loaded.samples, 2000);
    }

    #[test]
    fn rejects_out_of_order_schedule() {
        let mut text = minimal_file(0.5);
        text = text.replace("[schedule]", "[schedule]\ntheta0 = [0.7]");
        text = text.replace(
            "arc_controls = [[-1.0, -1.0], [1.0, 1.0]]",
            "arc_controls = [[-1.0, 1.0], [-1.0, -1.0], [1.0, 1.0]]",
        );
        let err = load_problem_str(&text).unwrap_err();
        assert!(format!("{err:#}").contains("strictly increasing"), "{err:#}");
    }

    #[test]
    fn rejects_single_control() {
        let text = r#"
dimension = 2
controls = 1
horizon = 1.0
drift = ["1", "0"]
fields = [["0", "x1-0.5"]]
cost_initial = "x2"
cost_final = "-x2"
x0 = [0.0, 0.0]
lambda0 = [0.0, 1.0]
p0 = 1

[schedule]
tau = 0.5
arc_controls = [[-1.0], [1.0]]
"#;
        let err = load_problem_str(text).unwrap_err();
        assert!(format!("{err:#}").contains("at least two controls"));
    }

    #[test]
    fn reports_expression_errors_with_field_paths() {
        let text = minimal_file(0.5).replace("\"x2\"", "\"x7\"");
        let err = load_problem_str(&text).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("cost_initial"), "{msg}");
    }
}
