//! Trajectory-based prognosis pipeline on synthetic longitudinal cohorts.
//!
//! The pipeline has three independently runnable phases:
//!
//! 1. a Siamese encoder turns paired pre/post volumes into unit-norm
//!    trajectory vectors ([`encoder`]), trained with a joint supervised
//!    contrastive + focal objective on top of a small reverse-mode
//!    autodiff kernel ([`diffkernel`]);
//! 2. trajectory vectors of training subjects are frozen into a
//!    population [`archive`] queried by exact cosine top-k search;
//! 3. a calibrated [`oracle`] blends the neighbor vote with a pluggable
//!    verdict provider into a decision probability with an auditable
//!    justification.
//!
//! [`classifiers`] holds trajectory-space baselines and [`eval`] the
//! leakage-free stratified cross-validation harness that ties everything
//! together. [`synthdata`] generates the deterministic synthetic cohorts
//! everything runs on.

pub mod archive;
pub mod classifiers;
pub mod diffkernel;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod rng;
pub mod synthdata;

pub use error::CoreError;
pub use synthdata::{CohortSpec, Sex, SubjectRecord, Volume};
