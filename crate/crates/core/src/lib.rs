//! Training-data attribution for small MLPs.
//!
//! Influence-function scores need an inverse-Hessian-vector product against
//! the Gauss-Newton curvature. This crate provides the pieces to compute
//! them: an MLP engine with forward-mode curvature products, an SGD trainer
//! that records checkpoints, an eigenvalue-corrected Kronecker-factored
//! preconditioner, stochastic iterative solvers, attribution scoring
//! (static and segment-unrolled) and linear-datamodeling evaluation.

// NaN-rejecting guards are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod attribution;
pub mod data;
pub mod ekfac;
pub mod error;
pub mod evaluation;
pub mod ihvp;
pub mod io;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
