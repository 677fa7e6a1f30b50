//! Retention-aware machine unlearning on small convex and shallow models.
//!
//! The crate covers the full loop: synthetic data, fine-tuning, gradient
//! attribution (proxy scores, influence functions, leave-one-out retraining),
//! weighted and unweighted unlearning updates, and the first-order theory
//! that predicts how much retention the weighting buys.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod config;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod theory;
pub mod unlearning;

pub use attribution::{AttributionReport, IfBounds, LooOracle};
pub use linalg::{EigenDecomp, SymMatrix};
pub use model::{Dataset, ModelKind, ModelSpec, ParamVector, Samples};
pub use synthdata::GenSpec;
pub use theory::TheoryReport;
pub use unlearning::{GuardWeights, Method, UnlearnConfig, UnlearnResult};
