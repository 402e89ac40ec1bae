//! Command-line interface: certify problem files, run the brute-force
//! oracle, dump perturbed maximized-flow trajectories, emit synthetic
//! fixtures and evaluate the subproblem cost.
//!
//! Exit codes: 0 certified, 1 refuted, 2 inconclusive, 3 input error.

use anyhow::{bail, Context, Result};
use bbcert_cli::certify::{certify, CertifyOptions};
use bbcert_cli::fixture::{construct_fixture, FixtureRecipe};
use bbcert_cli::oracle::{brute_force_oracle, fp_cost_oracle, OracleOptions};
use bbcert_cli::problemfile::load_problem;
use bbcert_cli::report::{human_summary, machine_report, oracle_block};
use bbcert::flows::ReferenceFlow;
use bbcert::geometry::CotangentPoint;
use bbcert::secondvar::BoundaryPenalty;
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "bbcert",
    about = "Certify strong local optimality of bang-bang extremals with a double switch"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full certification pipeline on a problem file.
    Certify {
        file: PathBuf,
        /// Where to write the machine-readable certificate (default: the
        /// problem file with a `.cert` extension).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Skip the brute-force cross-check stage.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Sample perturbed admissible trajectories and report the cost gap.
    Oracle {
        file: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Integrate the maximized flow from a perturbed covector and dump the
    /// trajectory (time, state, covector per line).
    Simulate {
        file: PathBuf,
        /// Comma-separated covector perturbation (n entries).
        #[arg(long, default_value = "")]
        perturb: String,
        #[arg(long)]
        out: PathBuf,
        /// Sample count of the dump grid.
        #[arg(long, default_value_t = 201)]
        points: usize,
    },
    /// Construct a synthetic fixture and write its problem file.
    Fixture {
        /// normal-generic | abnormal | commuting-f1f2 | coercivity-broken |
        /// degenerate-dtau
        recipe: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the switching-shift subproblem cost at given shifts.
    FpCost {
        file: PathBuf,
        /// Comma-separated simple-switch shifts (J0+J1 entries; may be
        /// empty).
        #[arg(long, default_value = "")]
        delta: String,
        /// Comma-separated double-switch shifts eps1,eps2.
        #[arg(long)]
        eps: String,
    },
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number `{p}`"))
        })
        .collect()
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Certify {
            file,
            report,
            no_oracle,
        } => {
            let loaded = load_problem(&file)?;
            let rep = certify(
                &loaded,
                &CertifyOptions {
                    run_oracle: !no_oracle,
                    oracle_samples: None,
                },
            );
            let report = report.unwrap_or_else(|| file.with_extension("cert"));
            std::fs::write(&report, machine_report(&rep))
                .with_context(|| format!("writing {}", report.display()))?;
            print!("{}", human_summary(&rep));
            Ok(rep.verdict.exit_code())
        }
        Command::Oracle {
            file,
            radius,
            samples,
            seed,
        } => {
            let loaded = load_problem(&file)?;
            let rf = ReferenceFlow::new(&loaded.problem, &loaded.extremal, loaded.ode)?;
            let out = brute_force_oracle(
                &rf,
                &OracleOptions {
                    radius: radius.unwrap_or(loaded.radius),
                    samples: samples.unwrap_or(loaded.samples),
                    seed: seed.unwrap_or(loaded.seed),
                    ..Default::default()
                },
            )?;
            print!("{}", oracle_block(&out));
            Ok(if out.refuted { 1 } else { 0 })
        }
        Command::Simulate {
            file,
            perturb,
            out,
            points,
        } => {
            let loaded = load_problem(&file)?;
            let rf = ReferenceFlow::new(&loaded.problem, &loaded.extremal, loaded.ode)?;
            let dp = parse_floats(&perturb)?;
            let n = loaded.problem.n;
            if !dp.is_empty() && dp.len() != n {
                bail!("--perturb expects {n} entries");
            }
            let mut p = loaded.extremal.lambda0.clone();
            for (i, v) in dp.iter().enumerate() {
                p[i] += v;
            }
            let l = CotangentPoint::new(p, loaded.extremal.x0.clone())?;
            let mut text = String::new();
            for k in 0..points {
                let t = loaded.problem.horizon * k as f64 / (points - 1) as f64;
                let (lt, _) = rf.maximized_flow(&l, t)?;
                let mut row = format!("{t:.12e}");
                for v in lt.x.iter() {
                    row.push_str(&format!(" {v:.12e}"));
                }
                for v in lt.p.iter() {
                    row.push_str(&format!(" {v:.12e}"));
                }
                text.push_str(&row);
                text.push('\n');
            }
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            Ok(0)
        }
        Command::Fixture { recipe, seed, out } => {
            let recipe: FixtureRecipe = recipe.parse()?;
            let file = construct_fixture(recipe, seed)?;
            let text = toml::to_string_pretty(&file).context("serializing fixture")?;
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::FpCost { file, delta, eps } => {
            let loaded = load_problem(&file)?;
            let rf = ReferenceFlow::new(&loaded.problem, &loaded.extremal, loaded.ode)?;
            let pen = BoundaryPenalty::new(&rf, loaded.d2alpha.clone(), None)?;
            let delta = parse_floats(&delta)?;
            let eps = parse_floats(&eps)?;
            if eps.len() != 2 {
                bail!("--eps expects exactly two entries eps1,eps2");
            }
            let x0: DVector<f64> = loaded.extremal.x0.clone();
            let cost = fp_cost_oracle(&rf, &pen, &x0, &delta, (eps[0], eps[1]))?;
            println!("{cost:.17e}");
            Ok(0)
        }
    }
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(3);
        }
    }
}
