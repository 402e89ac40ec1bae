//! Certification toolkit for bang-bang extremals of control-affine Mayer
//! problems with finitely many simple switches and one double switch.
//!
//! The library is organized as a pipeline of independent stages:
//!
//! * [`exprlang`] — a small closed-form expression language with exact
//!   symbolic differentiation; all vector fields, costs and boundary
//!   constraints are given in it, so every Jacobian and Hessian used
//!   downstream is exact.
//! * [`geometry`] — Lie brackets, Hamiltonian lifts and the symplectic
//!   pairing in a single coordinate chart.
//! * [`flows`] — the reference flow and its variational equation, the
//!   adjoint, pulled-back arc fields, and the maximized flow with its
//!   implicit switching-time functions and their exact gradients.
//! * [`conditions`] — PMP residuals and the strong bang-bang Legendre
//!   conditions, each checked in three equivalent formulations.
//! * [`secondvar`] — the finite-dimensional subproblem obtained by moving
//!   the switching times, its two second variations (one per ordering of
//!   the decoupled double switch), kernel spaces, coercivity verdicts and
//!   the subspace-chain decomposition.
//! * [`plinv`] — piecewise-linear maps on polyhedral cone fans,
//!   topological degree, the determinant-convexity identity, and the
//!   per-switch invertibility certificates for the projected maximized
//!   flow.
//!
//! Covectors are row-oriented throughout; the duality product is the plain
//! dot product. The symplectic pairing of two Hamiltonian lifts is *defined*
//! as `⟨p, [f, g](x)⟩`, which makes the bracket and flow-derivative
//! formulations of the Legendre conditions agree sign-for-sign.

pub mod conditions;
pub mod error;
pub mod exprlang;
pub mod flows;
pub mod geometry;
pub mod ode;
pub mod plinv;
pub mod secondvar;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
