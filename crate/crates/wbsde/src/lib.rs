//! Numerical laboratory for backward stochastic differential equations whose
//! unknowns live on the space of probability measures.
//!
//! The object of study is a deterministic backward identity along measure
//! flows: a value map `Y(t, m)` on time x measure and a kernel `Z(t, x, m)`
//! such that, for every flow `(mu_t)` generated by a unit-diffusion SDE with
//! bounded drift `B`,
//!
//! ```text
//! Y(t, mu_t) = psi(mu_T) + E[ int_t^T f(r, X_r, mu_r, Y(r, mu_r), Z(r, X_r, mu_r)) dr ]
//!                        - E[ int_t^T Z(r, X_r, mu_r) B(r, X_r) dr ]
//! ```
//!
//! The crate provides measure primitives, a library of cylinder functionals
//! and generators, flow simulation, closed-form solvers for the tractable
//! generator classes (zero, linear-in-z, quadratic, separable), an n-particle
//! backward solver, a Picard solver for the measure-valued value map, an
//! entropic mean-field control layer, a master-equation (PDE) cross-check,
//! and a verification harness that evaluates the backward identity along
//! simulated flows.
//!
//! Everything is deterministic given a seed: randomness flows from a single
//! seed through named substreams, and each simulated path owns an RNG derived
//! from (seed, path index), so results do not depend on thread count.

#![forbid(unsafe_code)]

pub mod error;
pub mod rng;
pub mod quad;
pub mod linreg;
pub mod measure;
pub mod functional;
pub mod flow;
pub mod solution;
pub mod explicit;
pub mod particle;
pub mod picard;
pub mod mfc;
pub mod pde;
pub mod verify;
pub mod cli;

pub use error::{Error, Result};
