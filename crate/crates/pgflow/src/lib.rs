//! Desk-scale solver and verification laboratory for continuous-time
//! stochastic optimal control with controlled diffusion on the flat torus.
//!
//! The crate implements both pathways of the policy-gradient flow for the
//! control function `u(t,x)`:
//!
//! * the exact PDE pathway: backward policy evaluation of the value
//!   function, forward density transport, and the functional gradient
//!   `dJ/du = -rho grad_u G`;
//! * the sampling pathway: Euler-Maruyama trajectories with counter-based
//!   random numbers, Monte Carlo cost estimates, and a least-squares
//!   parameter update on the grid parametrization.
//!
//! Built-in problems with known structure (a quartic double-well trap, a
//! manufactured strongly concave problem, and a controlled-diffusion demo)
//! double as oracles for the experiment suite in [`experiments`] and the
//! acceptance checks in [`acceptance`].
//!
//! See the `book/` directory for a guided tour; its code snippets compile and
//! run as doc-tests of this crate.

// Stencil kernels index several parallel arrays per node; explicit indices
// are the readable form here.
#![allow(clippy::needless_range_loop)]

pub mod digest;
pub mod error;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod linalg;
pub mod local_opt;
pub mod pde;
pub mod problem;
pub mod problems;
pub mod rng;
pub mod sampler;

pub mod acceptance;
pub mod experiments;

pub use error::{Error, Result};
pub use field::{ControlField, FieldRole, ScalarField};
pub use geometry::TorusGeometry;
pub use grid::SpaceTimeGrid;
pub use problem::{CoState, ProblemSpec};
pub use problems::{build_problem, build_problem_with_horizon, BuiltinProblem};

// Keep the guide's code blocks compiling: every chapter of the book is run as
// a doc-test of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/problems.md")]
    mod problems {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/pde-solvers.md")]
    mod pde_solvers {}
    #[doc = include_str!("../../../book/src/local-optimality.md")]
    mod local_optimality {}
    #[doc = include_str!("../../../book/src/gradient-flow.md")]
    mod gradient_flow {}
    #[doc = include_str!("../../../book/src/monte-carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
