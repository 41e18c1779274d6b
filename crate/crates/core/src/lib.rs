//! Bregman distances as a computational object.
//!
//! Convex functionals with certified subgradients and conjugates, quadratic
//! variational regularization with its exact error identities, Bregman
//! iteration and exact inverse scale space flows for ℓ1, entropy-dissipating
//! Fokker–Planck simulation, Bregman projections for p-Laplace Galerkin
//! solutions, entropic optimal transport and Monte-Carlo error checks.

pub mod bregman_iter;
pub mod convex;
pub mod error;
pub mod fokker_planck;
pub mod galerkin;
pub mod io;
pub mod iss;
mod lasso;
pub mod operators;
pub mod ot;
pub mod rng;
pub mod uq;
pub mod variational;

pub use convex::{
    bregman, dual_bregman_residual, infconv_bregman, shifted_conjugate, subgradient_select, symmetric_bregman,
    Functional, InfConv, L1Weights, RealVec, SubgradientPair,
};
pub use error::{Error, Result};
pub use operators::{sign_constrained_lsq, LinOp, Sign, SignedSupport};
