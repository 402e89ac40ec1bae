//! Certificate emission: a machine-readable structured text document plus
//! a human summary. Formatting is fully deterministic so identical inputs
//! and seeds produce byte-identical reports.

use crate::certify::CertificateReport;
use crate::oracle::OracleOutcome;
use bbcert::plinv::TriState;
use std::fmt::Write;

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// The machine-readable certificate document.
pub fn machine_report(r: &CertificateReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "verdict = \"{}\"", r.verdict.as_str());
    let _ = writeln!(out);
    let _ = writeln!(out, "[settings]");
    for (k, v) in &r.settings {
        if k == "seed" {
            let _ = writeln!(out, "{k} = {}", *v as u64);
        } else {
            let _ = writeln!(out, "{k} = {}", num(*v));
        }
    }
    for s in &r.stages {
        let _ = writeln!(out);
        let _ = writeln!(out, "[stage.{}]", s.name);
        let _ = writeln!(out, "status = \"{}\"", s.status);
        for (k, v) in &s.detail {
            let _ = writeln!(out, "{k} = {}", num(*v));
        }
    }
    for c in &r.conditions {
        let _ = writeln!(out);
        let _ = writeln!(out, "[condition.{}]", c.name);
        let _ = writeln!(out, "pass = {}", c.pass);
        let _ = writeln!(out, "margin = {}", num(c.margin));
        let _ = writeln!(out, "residual = {}", num(c.residual));
        for (k, v) in &c.values {
            let _ = writeln!(out, "{k} = {}", num(*v));
        }
        for (i, loc) in c.locations.iter().enumerate() {
            let _ = writeln!(out, "location_{i} = \"{loc}\"");
        }
    }
    for (nu, steps) in &r.chains {
        for (k, s) in steps.iter().enumerate() {
            let _ = writeln!(out);
            let _ = writeln!(out, "[chain.nu{nu}.step{k}]");
            let _ = writeln!(out, "name = \"{}\"", s.name);
            let _ = writeln!(out, "pass = {}", s.pass);
            let _ = writeln!(out, "dim = {}", s.actual_dim);
            let _ = writeln!(out, "block_min_eig = {}", num(s.block_min_eig));
            let _ = writeln!(out, "closed_form_residual = {}", num(s.closed_form_residual));
            let _ = writeln!(
                out,
                "characterization_residual = {}",
                num(s.characterization_residual)
            );
            for (i, v) in s.direct_values.iter().enumerate() {
                let _ = writeln!(out, "value_{i} = {}", num(*v));
            }
        }
    }
    if let Some(inv) = &r.invertibility {
        for (k, s) in inv.switches.iter().enumerate() {
            let _ = writeln!(out);
            let _ = writeln!(out, "[invertibility.switch{k}]");
            let _ = writeln!(out, "label = \"{}\"", s.label);
            let _ = writeln!(out, "route = \"{}\"", s.route);
            let _ = writeln!(out, "state = \"{}\"", tri(s.state));
            for (i, d) in s.determinants.iter().enumerate() {
                let _ = writeln!(out, "det_{i} = {}", num(*d));
            }
            for (i, note) in s.notes.iter().enumerate() {
                let _ = writeln!(out, "note_{i} = \"{note}\"");
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "[invertibility]");
        let _ = writeln!(out, "aggregate = \"{}\"", tri(inv.aggregate));
    }
    for (nu, reps) in &r.final_hessian {
        let _ = writeln!(out);
        let _ = writeln!(out, "[final_hessian.nu{nu}]");
        for (i, (d, c)) in reps.iter().enumerate() {
            let _ = writeln!(out, "direct_{i} = {}", num(*d));
            let _ = writeln!(out, "closed_{i} = {}", num(*c));
        }
    }
    if let Some(radius) = r.validity_radius {
        let _ = writeln!(out);
        let _ = writeln!(out, "[validity]");
        let _ = writeln!(out, "radius = {}", num(radius));
    }
    if let Some(o) = &r.oracle {
        let _ = writeln!(out);
        let _ = writeln!(out, "[oracle]");
        out.push_str(&oracle_block(o));
    }
    if let Some(e) = &r.oracle_error {
        let _ = writeln!(out);
        let _ = writeln!(out, "[oracle]");
        let _ = writeln!(out, "error = \"{e}\"");
    }
    out
}

fn tri(t: TriState) -> &'static str {
    match t {
        TriState::Certified => "certified",
        TriState::Inconclusive => "inconclusive",
        TriState::Failed => "failed",
    }
}

pub fn oracle_block(o: &OracleOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "samples = {}", o.samples);
    let _ = writeln!(out, "accepted = {}", o.accepted);
    let _ = writeln!(out, "min_gap = {}", num(o.min_gap));
    let _ = writeln!(out, "min_gap_large_perturbation = {}", num(o.min_gap_large));
    let _ = writeln!(out, "max_gap = {}", num(o.max_gap));
    let _ = writeln!(out, "refuted = {}", o.refuted);
    let worst: Vec<String> = o.worst.iter().map(|v| num(*v)).collect();
    let _ = writeln!(out, "worst_perturbation = [{}]", worst.join(", "));
    out
}

/// The short human summary printed to stdout.
pub fn human_summary(r: &CertificateReport) -> String {
    let mut out = String::new();
    for s in &r.stages {
        let _ = writeln!(out, "{:<18} {}", s.name, s.status);
    }
    if let Some(radius) = r.validity_radius {
        let _ = writeln!(out, "{:<18} {}", "validity radius", num(radius));
    }
    if let Some(o) = &r.oracle {
        let _ = writeln!(
            out,
            "{:<18} min gap {} over {} accepted samples",
            "oracle", num(o.min_gap), o.accepted
        );
    }
    let _ = writeln!(out, "verdict: {}", r.verdict.as_str());
    out
}
