//! Backward SDE solver built around the Full-Projection explicit scheme.
//!
//! The crate solves decoupled forward-backward SDEs
//!
//! ```text
//! X_t = x0 + ∫ b(s, X_s) ds + ∫ σ(s, X_s) dW_s
//! Y_t = g(X_T) + ∫_t^T f(Y_s, Z_s) ds - ∫_t^T Z_s dW_s
//! ```
//!
//! with drivers that are monotone in `y` and grow polynomially. Conditional
//! expectations are evaluated exactly on a recombining trinomial lattice, so
//! the one-step stability inequalities of the scheme can be checked node by
//! node.
//!
//! Module map:
//!
//! - [`model`]: coefficients, drivers, assumption constants and probes.
//! - [`grids`]: time grid, truncations, increment laws, weights, spatial grid.
//! - [`forward`]: Euler steps and lattice construction.
//! - [`treeval`]: finite-sum conditional expectations and the chain law.
//! - [`schemes`]: one-step backward operators and backward induction.
//! - [`oracle`]: closed forms, finite-difference PDE solver, proxy reference.
//! - [`analysis`]: convergence studies and stability ledgers.
//! - [`cli`]: experiment presets, configuration and artifact emission.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod forward;
pub mod grids;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod schemes;
pub mod treeval;

pub use error::{FbsdeError, Result};
