//! Counterfactual results and their quality metrics, shared by the naive
//! baseline and sequential propagation.

use serde::{Deserialize, Serialize};

use crate::catalog::{FeatureCatalog, FeatureId, TaxonomyClass};
use crate::cohort::{Period, TemporalFeatureVector};
use crate::depgraph::DependencyGraph;
use crate::error::{Error, Result};
use crate::plausibility::{verdict, PlausibilityVerdict};
use crate::riskmodel::RiskScorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Added,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Change {
    pub feature: FeatureId,
    pub code: String,
    pub period: Period,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    /// f(factual) - f(counterfactual)
    pub predictive_shift: f64,
    pub plausible: bool,
    /// Some Intervention-class bit differs.
    pub actionable: bool,
    /// L0 distance.
    pub sparsity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticSummary {
    pub n_samples: usize,
    /// Mean risk over the Monte Carlo samples.
    pub mean: f64,
    pub stddev: f64,
}

/// One applied intervention in display form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedIntervention {
    pub code: String,
    pub period: Period,
    pub action: crate::seqcf::Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub factual: TemporalFeatureVector,
    pub counterfactual: TemporalFeatureVector,
    pub changed: Vec<Change>,
    pub interventions: Vec<AppliedIntervention>,
    pub y_factual: f64,
    pub y_cf: f64,
    pub metrics: QualityMetrics,
    pub plausibility: PlausibilityVerdict,
    pub stochastic: Option<StochasticSummary>,
}

pub fn changes(catalog: &FeatureCatalog, factual: &TemporalFeatureVector, cf: &TemporalFeatureVector) -> Vec<Change> {
    factual
        .diff(cf)
        .into_iter()
        .map(|(f, t)| Change {
            feature: f,
            code: catalog.code(f).to_string(),
            period: t,
            direction: if cf.get(f, t) {
                Direction::Added
            } else {
                Direction::Removed
            },
        })
        .collect()
}

/// Metrics for a pair whose plausibility verdict is already known.
pub fn compute_metrics(
    model: &impl RiskScorer,
    catalog: &FeatureCatalog,
    factual: &TemporalFeatureVector,
    cf: &TemporalFeatureVector,
    plausibility: &PlausibilityVerdict,
) -> Result<QualityMetrics> {
    if factual.dim() != cf.dim() {
        return Err(Error::DimensionMismatch {
            expected: factual.dim(),
            actual: cf.dim(),
        });
    }
    let diff = factual.diff(cf);
    Ok(QualityMetrics {
        predictive_shift: model.try_score(factual)? - model.try_score(cf)?,
        plausible: plausibility.plausible(),
        actionable: diff
            .iter()
            .any(|&(f, _)| catalog.class(f) == TaxonomyClass::Intervention),
        sparsity: diff.len(),
    })
}

/// Score, check and package a counterfactual pair.
pub fn evaluate(
    model: &impl RiskScorer,
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    cf: TemporalFeatureVector,
    interventions: Vec<AppliedIntervention>,
) -> Result<CounterfactualResult> {
    let plausibility = verdict(catalog, graph, factual, &cf)?;
    let metrics = compute_metrics(model, catalog, factual, &cf, &plausibility)?;
    Ok(CounterfactualResult {
        changed: changes(catalog, factual, &cf),
        y_factual: model.try_score(factual)?,
        y_cf: model.try_score(&cf)?,
        factual: factual.clone(),
        counterfactual: cf,
        interventions,
        metrics,
        plausibility,
        stochastic: None,
    })
}
