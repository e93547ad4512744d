//! Sequential counterfactual explanations over three-period binary clinical
//! features: catalog and cohort handling, a calibrated synthetic cohort
//! generator, temporal dependency graph estimation, plausibility auditing,
//! a naive counterfactual baseline and the forward propagation operator.

pub mod cascade;
pub mod catalog;
pub mod cohort;
pub mod counterfactual;
pub mod depgraph;
pub mod engine;
pub mod error;
pub mod naivecf;
pub mod num;
pub mod plausibility;
pub mod riskmodel;
pub mod rng;
pub mod seqcf;
pub mod synth;

pub use catalog::{FeatureCatalog, FeatureId, InterventionPathway, TaxonomyClass};
pub use cohort::{Cohort, Patient, Period, TemporalFeatureVector};
pub use error::{Error, Result};
pub use riskmodel::{LogisticModel, RiskScorer};

/// Risk model in double precision, the default everywhere.
pub type RiskModel = riskmodel::LogisticModel<f64>;
/// Single-precision risk model.
pub type RiskModelF32 = riskmodel::LogisticModel<f32>;
