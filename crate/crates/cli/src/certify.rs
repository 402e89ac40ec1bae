//! The certification pipeline: every hypothesis of the optimality theorem
//! checked in order with explicit margins, cross-validated by the
//! brute-force oracle, aggregated into a single verdict.

use crate::oracle::{brute_force_oracle, OracleOptions, OracleOutcome};
use crate::problemfile::LoadedProblem;
use bbcert::conditions::{
    check_legendre_double, check_legendre_simple, check_pmp, check_regularity, ConditionReport,
};
use bbcert::flows::ReferenceFlow;
use bbcert::plinv::{flow_invertibility_check, InvertibilityOptions, InvertibilityReport, TriState};
use bbcert::secondvar::{
    assemble_hamiltonian_form, assemble_second_variation, coercivity_check, final_hessian_check,
    hestenes_penalty_search, kernel_space, subspace_chain, BoundaryPenalty, ChainStep,
    CoercivityOutcome,
};

/// Final verdict of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    CertifiedStrictStrongLocalMin,
    CertifiedAbnormalIsolated,
    RefutedByOracle,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::CertifiedStrictStrongLocalMin => "certified-strict-strong-local-min",
            Verdict::CertifiedAbnormalIsolated => "certified-abnormal-isolated",
            Verdict::RefutedByOracle => "refuted-by-oracle",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::CertifiedStrictStrongLocalMin | Verdict::CertifiedAbnormalIsolated => 0,
            Verdict::RefutedByOracle => 1,
            Verdict::Inconclusive => 2,
        }
    }
}

/// One pipeline stage as reported.
#[derive(Debug, Clone)]
pub struct StageSummary {
    pub name: String,
    /// `pass`, `fail`, `error: …`, or `skipped`.
    pub status: String,
    pub detail: Vec<(String, f64)>,
}

/// The full certificate.
#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub verdict: Verdict,
    pub stages: Vec<StageSummary>,
    pub conditions: Vec<ConditionReport>,
    /// Coercivity on the constrained kernel, per branch.
    pub coercivity_constrained: Vec<CoercivityOutcome>,
    /// Coercivity on the free kernel after the penalty search, per branch.
    pub coercivity_free: Vec<CoercivityOutcome>,
    pub hestenes_rho: Option<f64>,
    /// Subspace chains per branch.
    pub chains: Vec<(usize, Vec<ChainStep>)>,
    pub invertibility: Option<InvertibilityReport>,
    /// Final-Hessian representatives `(direct, closed)` per branch.
    pub final_hessian: Vec<(usize, Vec<(f64, f64)>)>,
    pub validity_radius: Option<f64>,
    pub oracle: Option<OracleOutcome>,
    pub oracle_error: Option<String>,
    /// Echo of thresholds and seeds for replay.
    pub settings: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    /// Run the brute-force cross-check as the last stage.
    pub run_oracle: bool,
    /// Oracle sample count override (defaults to the problem file's).
    pub oracle_samples: Option<usize>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            run_oracle: true,
            oracle_samples: None,
        }
    }
}

macro_rules! stage {
    ($report:expr, $pending:expr, $name:expr, $body:expr) => {{
        match $body {
            Ok(v) => v,
            Err(e) => {
                $report.stages.push(StageSummary {
                    name: $name.into(),
                    status: format!("error: {e}"),
                    detail: vec![],
                });
                $report.verdict = Verdict::Inconclusive;
                for p in $pending {
                    $report.stages.push(StageSummary {
                        name: (*p).into(),
                        status: "skipped".into(),
                        detail: vec![],
                    });
                }
                return $report;
            }
        }
    }};
}

/// Run the full pipeline. All failures are report states; the function
/// itself does not error.
pub fn certify(loaded: &LoadedProblem, opts: &CertifyOptions) -> CertificateReport {
    let mut report = CertificateReport {
        verdict: Verdict::Inconclusive,
        stages: Vec::new(),
        conditions: Vec::new(),
        coercivity_constrained: Vec::new(),
        coercivity_free: Vec::new(),
        hestenes_rho: None,
        chains: Vec::new(),
        invertibility: None,
        final_hessian: Vec::new(),
        validity_radius: None,
        oracle: None,
        oracle_error: None,
        settings: vec![
            ("rtol".into(), loaded.ode.rtol),
            ("atol".into(), loaded.ode.atol),
            ("margin_scale".into(), loaded.thresholds.margin_scale),
            ("residual_scale".into(), loaded.thresholds.residual_scale),
            ("coercivity_scale".into(), loaded.coercivity_scale),
            ("seed".into(), loaded.seed as f64),
            ("oracle_radius".into(), loaded.radius),
        ],
    };

    let all_stages: &[&str] = &[
        "reference-flow",
        "pmp",
        "regularity",
        "pull-backs",
        "legendre-simple",
        "legendre-double",
        "gradients",
        "penalty",
        "coercivity",
        "subspace-chain",
        "validity-radius",
        "invertibility",
        "final-hessian",
        "oracle",
    ];
    let pending = |k: usize| &all_stages[k..];

    let rf = stage!(
        report,
        pending(1),
        "reference-flow",
        ReferenceFlow::new(&loaded.problem, &loaded.extremal, loaded.ode)
    );
    report.stages.push(StageSummary {
        name: "reference-flow".into(),
        status: "pass".into(),
        detail: vec![("x_final_norm".into(), rf.x_final().norm())],
    });

    let mut all_pass = true;
    let condition_stage = |report: &mut CertificateReport,
                               name: &str,
                               rep: ConditionReport|
     -> bool {
        let pass = rep.pass;
        report.stages.push(StageSummary {
            name: name.into(),
            status: if pass { "pass" } else { "fail" }.into(),
            detail: vec![
                ("margin".into(), rep.margin),
                ("residual".into(), rep.residual),
            ],
        });
        report.conditions.push(rep);
        pass
    };

    let pmp = stage!(report, pending(2), "pmp", check_pmp(&rf, &loaded.thresholds));
    all_pass &= condition_stage(&mut report, "pmp", pmp);

    let reg = stage!(
        report,
        pending(3),
        "regularity",
        check_regularity(&rf, &loaded.thresholds)
    );
    all_pass &= condition_stage(&mut report, "regularity", reg);

    let pulled = stage!(report, pending(4), "pull-backs", rf.pull_back_fields());
    report.stages.push(StageSummary {
        name: "pull-backs".into(),
        status: "pass".into(),
        detail: vec![],
    });

    let leg1 = stage!(
        report,
        pending(5),
        "legendre-simple",
        check_legendre_simple(&rf, &pulled, &loaded.thresholds)
    );
    all_pass &= condition_stage(&mut report, "legendre-simple", leg1);

    let leg2 = stage!(
        report,
        pending(6),
        "legendre-double",
        check_legendre_double(&rf, &pulled, &loaded.thresholds)
    );
    all_pass &= condition_stage(&mut report, "legendre-double", leg2);

    if !all_pass {
        // Hard failure of a hypothesis: report remaining stages as skipped.
        for p in pending(6) {
            report.stages.push(StageSummary {
                name: (*p).into(),
                status: "skipped".into(),
                detail: vec![],
            });
        }
        report.verdict = Verdict::Inconclusive;
        return report;
    }

    let grads = stage!(
        report,
        pending(7),
        "gradients",
        rf.switching_time_gradients(&pulled)
    );
    report.stages.push(StageSummary {
        name: "gradients".into(),
        status: "pass".into(),
        detail: vec![
            ("tautheta_residual_1".into(), grads.tautheta_residual[0]),
            ("tautheta_residual_2".into(), grads.tautheta_residual[1]),
        ],
    });

    let base_pen = stage!(
        report,
        pending(8),
        "penalty",
        BoundaryPenalty::new(&rf, loaded.d2alpha.clone(), None)
    );
    report.stages.push(StageSummary {
        name: "penalty".into(),
        status: "pass".into(),
        detail: vec![(
            "gamma_grad_residual".into(),
            base_pen.gamma_grad_residual,
        )],
    });

    // Coercivity: constrained kernel first, then the Hestenes search and
    // the free kernel, for both branch forms. The Hamiltonian assembly is
    // cross-checked against the bracket assembly here.
    let coercivity_result = (|| -> bbcert::Result<(BoundaryPenalty, f64, Vec<CoercivityOutcome>, Vec<CoercivityOutcome>, f64)> {
        let mut constrained = Vec::new();
        let mut cross_gap: f64 = 0.0;
        for nu in 1..=2usize {
            let q = assemble_second_variation(&pulled, &base_pen, nu)?;
            let qh = assemble_hamiltonian_form(&pulled, &base_pen, nu)?;
            cross_gap = cross_gap.max((&q - &qh).amax() / q.amax().max(1.0));
            let basis0 = kernel_space(&rf, &pulled, true, nu)?;
            constrained.push(coercivity_check(&q, &basis0, loaded.coercivity_scale));
        }
        let (pen, rho) = hestenes_penalty_search(&rf, &pulled, &base_pen, loaded.coercivity_scale)?;
        let mut free = Vec::new();
        for nu in 1..=2usize {
            let q = assemble_second_variation(&pulled, &pen, nu)?;
            let basis = kernel_space(&rf, &pulled, false, nu)?;
            free.push(coercivity_check(&q, &basis, loaded.coercivity_scale));
        }
        Ok((pen, rho, constrained, free, cross_gap))
    })();
    let (pen, rho, constrained, free, cross_gap) =
        stage!(report, pending(9), "coercivity", coercivity_result);
    let coercive = constrained.iter().all(|c| c.pass) && free.iter().all(|c| c.pass);
    report.stages.push(StageSummary {
        name: "coercivity".into(),
        status: if coercive { "pass" } else { "fail" }.into(),
        detail: vec![
            ("min_eig_constrained_1".into(), constrained[0].min_eigenvalue),
            ("min_eig_constrained_2".into(), constrained[1].min_eigenvalue),
            ("min_eig_free_1".into(), free[0].min_eigenvalue),
            ("min_eig_free_2".into(), free[1].min_eigenvalue),
            ("hestenes_rho".into(), rho),
            ("hamiltonian_form_gap".into(), cross_gap),
        ],
    });
    report.coercivity_constrained = constrained;
    report.coercivity_free = free;
    report.hestenes_rho = Some(rho);
    all_pass &= coercive;
    if !coercive {
        for p in pending(9) {
            report.stages.push(StageSummary {
                name: (*p).into(),
                status: "skipped".into(),
                detail: vec![],
            });
        }
        report.verdict = Verdict::Inconclusive;
        return report;
    }

    // Subspace chains for both branches.
    let chains_result = (|| -> bbcert::Result<Vec<(usize, Vec<ChainStep>)>> {
        let mut out = Vec::new();
        for nu in 1..=2usize {
            out.push((nu, subspace_chain(&rf, &pulled, &grads, &pen, nu)?));
        }
        Ok(out)
    })();
    let chains = stage!(report, pending(10), "subspace-chain", chains_result);
    let chain_ok = chains.iter().all(|(_, steps)| steps.iter().all(|s| s.pass));
    report.stages.push(StageSummary {
        name: "subspace-chain".into(),
        status: if chain_ok { "pass" } else { "fail" }.into(),
        detail: chains
            .iter()
            .flat_map(|(nu, steps)| {
                steps.iter().map(move |s| {
                    (
                        format!("nu{nu}_{}_min_eig", s.name.replace(' ', "_")),
                        s.block_min_eig,
                    )
                })
            })
            .collect(),
    });
    report.chains = chains;
    all_pass &= chain_ok;

    let radius = stage!(
        report,
        pending(11),
        "validity-radius",
        rf.probe_validity_radius(0.1 * (1.0 + rf.extremal.lambda0.norm()), 24, loaded.seed)
    );
    report.validity_radius = Some(radius);
    report.stages.push(StageSummary {
        name: "validity-radius".into(),
        status: "pass".into(),
        detail: vec![("radius".into(), radius)],
    });

    let inv_opts = InvertibilityOptions {
        seed: loaded.seed,
        expansion_scale: (1e-4f64).min(radius * 0.25),
        ..Default::default()
    };
    let inv = stage!(
        report,
        pending(12),
        "invertibility",
        flow_invertibility_check(&rf, &pulled, &grads, &pen, &inv_opts)
    );
    let inv_state = inv.aggregate;
    report.stages.push(StageSummary {
        name: "invertibility".into(),
        status: match inv_state {
            TriState::Certified => "pass".into(),
            TriState::Inconclusive => "fail: inconclusive".into(),
            TriState::Failed => "fail".into(),
        },
        detail: inv
            .switches
            .iter()
            .enumerate()
            .map(|(k, s)| {
                (
                    format!("switch_{k}_{}", s.label),
                    match s.state {
                        TriState::Certified => 1.0,
                        TriState::Inconclusive => 0.0,
                        TriState::Failed => -1.0,
                    },
                )
            })
            .collect(),
    });
    report.invertibility = Some(inv);
    all_pass &= inv_state == TriState::Certified;

    // Final Hessian positivity on the kernel complement of V, both
    // branches, as the derived check on the reduced final-point function.
    let final_result = (|| -> bbcert::Result<Vec<(usize, Vec<(f64, f64)>)>> {
        let mut out = Vec::new();
        for nu in 1..=2usize {
            out.push((nu, final_hessian_check(&rf, &pulled, &pen, nu)?));
        }
        Ok(out)
    })();
    let final_hessian = stage!(report, pending(13), "final-hessian", final_result);
    let final_ok = final_hessian.iter().all(|(_, reps)| {
        reps.iter().all(|(direct, closed)| {
            *direct > 0.0 && (direct - closed).abs() <= 1e-6 * direct.abs().max(1.0)
        })
    });
    report.stages.push(StageSummary {
        name: "final-hessian".into(),
        status: if final_ok { "pass" } else { "fail" }.into(),
        detail: final_hessian
            .iter()
            .flat_map(|(nu, reps)| {
                reps.iter().enumerate().map(move |(k, (d, _))| {
                    (format!("nu{nu}_rep{k}_value"), *d)
                })
            })
            .collect(),
    });
    report.final_hessian = final_hessian;
    all_pass &= final_ok;

    // Oracle cross-check.
    if opts.run_oracle {
        let oracle_opts = OracleOptions {
            radius: loaded.radius,
            samples: opts.oracle_samples.unwrap_or(loaded.samples),
            seed: loaded.seed,
            ..Default::default()
        };
        match brute_force_oracle(&rf, &oracle_opts) {
            Ok(out) => {
                let refuted = out.refuted;
                report.stages.push(StageSummary {
                    name: "oracle".into(),
                    status: if refuted { "fail: negative gap" } else { "pass" }.into(),
                    detail: vec![
                        ("min_gap".into(), out.min_gap),
                        ("accepted".into(), out.accepted as f64),
                    ],
                });
                report.oracle = Some(out);
                if refuted {
                    report.verdict = Verdict::RefutedByOracle;
                    return report;
                }
            }
            Err(e) => {
                // No admissible samples is a reportable state, not a
                // refutation (point final manifolds reject everything).
                report.oracle_error = Some(format!("{e}"));
                report.stages.push(StageSummary {
                    name: "oracle".into(),
                    status: format!("inconclusive: {e}"),
                    detail: vec![],
                });
            }
        }
    }

    report.verdict = if all_pass {
        if loaded.extremal.p0 == 0 {
            Verdict::CertifiedAbnormalIsolated
        } else {
            Verdict::CertifiedStrictStrongLocalMin
        }
    } else {
        Verdict::Inconclusive
    };
    report
}
