//! Problem-file ingestion, the certification pipeline, the brute-force
//! optimality and subproblem-cost oracles, synthetic fixture construction
//! and report emission.

pub mod certify;
pub mod fixture;
pub mod oracle;
pub mod problemfile;
pub mod report;

pub use certify::{certify, CertificateReport, CertifyOptions, Verdict};
pub use fixture::{construct_fixture, FixtureRecipe};
pub use oracle::{brute_force_oracle, fp_cost_oracle, OracleOptions, OracleOutcome};
pub use problemfile::{load_problem, load_problem_str, LoadedProblem, ProblemFile};
