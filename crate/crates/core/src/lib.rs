//! Bayesian hierarchical modelling of longitudinal DCE-MRI studies.
//!
//! Voxel concentration curves follow a compartmental model with a
//! bi-exponential arterial input. The log kinetic parameters are split into
//! study-level fixed effects (baseline and treatment), patient random
//! effects and voxel random effects, and the joint posterior is explored by
//! MCMC. A voxel-wise least-squares analysis with a Wilcoxon signed-rank
//! test provides the conventional comparison.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod error;
pub mod hierarchy;
pub mod kinetics;
pub mod posterior;
pub mod sampler;
pub mod studyio;

pub use error::{Error, Result};
