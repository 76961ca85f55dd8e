//! Exact, desk-scale diagnostics for families of local conditional
//! distributions.
//!
//! A denoising model is treated as a [`ConditionalOracle`]: a table of
//! conditionals `q(x_i | visible tokens)`. Resolving a block of positions in
//! different orders turns those conditionals into different pseudo-joints.
//! This crate measures how far they disagree (local curl, order-swap KL,
//! adjacent-swap decompositions, exact order-consistency checks), how much
//! within-block dependence one-shot parallel updates ignore (conditional
//! total correlation), which orders meet the smallest local errors, and how
//! commit-style decoders turn all of this into path sensitivity.
//!
//! Every model is small enough that each statistic can be computed by exact
//! enumeration and cross-checked against an independent brute-force route.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoding;
pub mod dependence;
pub mod error;
pub mod experiment;
pub mod math;
pub mod model;
pub mod order_error;
pub mod pseudo_joint;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};
pub use math::Estimate;
pub use model::{
    apply_logit_shift, Assignment, ConditionalOracle, LogitShifts, LogitTable, Model, ModelFile, PartialContext,
    PerturbedConditionalModel, TabularJointModel, Vocabulary,
};
pub use pseudo_joint::{CurlSample, PseudoJointSpec, SamplingPlan, SwapPath};

/// Tool version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
