//! Numerical laboratory for a zero-sum stochastic differential game in which
//! each player controls the volatility of a martingale living in a simplex.
//!
//! The value of the game solves a Hamilton-Jacobi equation with convexity
//! constraints. The crate computes that value two ways, by backward
//! convex/concave envelope iteration ([`hj`]) and by Monte Carlo play of
//! pathwise strategies with delay ([`sde`], [`splitting`], [`arena`]), and
//! checks that they agree.

pub mod arena;
pub mod cli;
pub mod config;
pub mod error;
pub mod hamiltonian;
pub mod hj;
pub mod report;
pub mod run;
pub mod sde;
pub mod simplex;
pub mod splitting;
pub mod verify;

pub use error::{Error, Result};
