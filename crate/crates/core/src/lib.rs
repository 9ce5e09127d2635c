//! Saturated instrumental-variable estimation.
//!
//! This crate holds the allocation-only numerical core: the saturated design
//! (covariate groups interacted with a binary instrument), matrix-free
//! application of every projection and diagonal operator the estimators
//! need, the saturated TSLS / JIVE1 / JIVE2 / SIVE point estimators with their
//! population estimands, and heteroskedasticity- and heterogeneity-robust
//! inference for SIVE.
//!
//! Nothing in here touches IO. File formats, the dense reference
//! implementation, the Monte Carlo harness and the command line live in the
//! companion `sive` crate.

#![no_std]

extern crate alloc;

pub mod blockops;
pub mod design;
pub mod estimators;
pub mod halton;
pub mod inference;
pub mod normal;

mod error;

pub use design::{DesignSummary, GroupAudit, GroupViolation, Sample, SaturatedDesign};
pub use error::{Error, Result};
pub use estimators::{EstimatorKind, FirstStage, NoiseMap, PopulationInputs};
pub use inference::{InferenceReport, RobustConfidenceSet, SigmaEstimates};
