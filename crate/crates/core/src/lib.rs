//! Null controls for the finite-difference stochastic heat equation.
//!
//! The state lives on a uniform 1-D mesh, the noise on a binary scenario
//! tree, and controls are computed by a penalized HUM with Carleman weights.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod carleman_weights;
pub mod discrete_calculus;
pub mod error;
pub mod experiment;
pub mod hum_control;
pub mod mesh;
pub mod scenario_tree;
pub mod spde_solvers;

pub use error::{Error, Result};
