//! Zeroth-order federated optimization for nonsmooth, nonconvex, bilevel,
//! minimax and two-stage problems.
//!
//! The engines consume the oracle traits in [`problems`] and return
//! [`engine::Trajectory`] records that the harness turns into CSV rows.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod problems;
pub mod projection;
pub mod rng;
pub mod smoothing;
pub mod tuning;

pub use error::{Result, ZofedError};
pub use nalgebra::DVector;
pub use problems::{
    BilevelProblem, LowerLevelOracle, LowerLevelSpec, MinimaxProblem, ParametricVi, ProblemInstance, TwoStageProblem,
    Variant, ViConstants, ZerothOrderOracle,
};
pub use projection::{ConvexSet, Projector};
pub use rng::{derive_seed, derive_seed_str, stream_rng, Sign, Stream, StreamRng};
pub use smoothing::{SmoothingParams, SphereSample, ZerothOrderGrad};

/// A point in the upper-level decision space.
pub type DecisionVector = DVector<f64>;
