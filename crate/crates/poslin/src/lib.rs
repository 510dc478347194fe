//! Optimal control of positive linear systems with linear costs and coupled
//! homogeneous input constraints.
//!
//! The problem class is
//!
//! ```text
//! minimize   sum_t  s'x(t) + r'u(t)
//! subject to x(t+1) = A x(t) + B u(t),   u(t) >= 0,   x(0) = x0,
//!            1'u_i(t) <= E_i' x(t)       for each input block i,
//! ```
//!
//! whose optimal cost is linear, `p'x0`, with `p` the fixed point of an
//! explicit Bellman equation. The crate provides
//!
//! - [`model`]: problem data, validation of the standing assumptions and the
//!   `E = I` normalization,
//! - [`bellman`]: the Bellman operator, value iteration, policy extraction
//!   and evaluation, plus a brute-force enumeration oracle,
//! - [`heuristics`]: linear upper/lower cost bounds, consistency checks,
//!   monotone improvement and the value-iteration rate bound,
//! - [`search`]: the heuristic search algorithm over a growing state subset,
//! - [`ssp`]: the bidirectional equivalence with Stochastic Shortest Path
//!   problems and the level-expansion for super-stochastic dynamics,
//! - [`gen`]: seeded instance generators and the textbook fixtures.
//!
//! Policy enumeration in the oracle runs on rayon when the default
//! `parallel` feature is enabled; disabling it gives a sequential build with
//! identical results.

pub mod bellman;
pub mod error;
pub mod gen;
pub mod heuristics;
pub mod model;
pub mod search;
pub mod ssp;

pub use error::{Error, Result};
pub use model::{Action, CostVector, Policy, ProblemInstance};

/// Numerical tolerance for sign and feasibility checks.
pub const TOL: f64 = 1e-9;

/// Default convergence tolerance for value iteration.
pub const VI_TOL: f64 = 1e-10;

/// Default iteration cap for value iteration.
pub const VI_MAX_ITER: usize = 100_000;
