//! Forward propagation of interventions through the dependency graph.
//!
//! Interventions are applied first, then Past and Last vertices are visited in
//! (period, feature) order, which is a topological order because every link
//! points forward in time. Two readings are offered:
//!
//! * deterministic: a bit is recomputed only when one of its table parents
//!   differs from the factual, and is set iff its conditional probability is
//!   at least 0.5. Untouched bits keep their factual value, so an empty
//!   intervention list returns the factual vector.
//! * stochastic: every non-intervened Past/Last bit is sampled from its table.
//!   Sample `k` uses draw `(stream = flat index, index = k)`, so two runs with
//!   the same seed share random numbers bit for bit.
//!
//! In both modes an Immutable bit that is present in the factual is never
//! cleared, and once present at some period it is carried to every later one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{FeatureCatalog, FeatureId, TaxonomyClass};
use crate::cohort::{Period, TemporalFeatureVector};
use crate::counterfactual::{evaluate, AppliedIntervention, CounterfactualResult, StochasticSummary};
use crate::depgraph::{DependencyGraph, Vertex};
use crate::error::{Error, Result};
use crate::riskmodel::RiskScorer;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Add,
    Remove,
}

impl Action {
    fn value(self) -> bool {
        self == Action::Add
    }
}

/// A manipulation of one Intervention-class bit at one period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Intervention {
    pub feature: FeatureId,
    pub period: Period,
    pub action: Action,
}

impl Intervention {
    pub fn new(catalog: &FeatureCatalog, code: &str, period: Period, action: Action) -> Result<Self> {
        let feature = catalog.require(code)?;
        let iv = Self {
            feature,
            period,
            action,
        };
        iv.validate(catalog)?;
        Ok(iv)
    }

    pub fn validate(&self, catalog: &FeatureCatalog) -> Result<()> {
        if self.feature.index() >= catalog.len() {
            return Err(Error::UnknownFeature(self.feature.to_string()));
        }
        let f = catalog.feature(self.feature);
        if f.class != TaxonomyClass::Intervention {
            return Err(Error::NotIntervention(f.code.clone()));
        }
        Ok(())
    }

    /// Parse `code@period` or `code@period:remove` (`:add` is also accepted).
    pub fn parse(catalog: &FeatureCatalog, spec: &str) -> Result<Self> {
        let syntax = || Error::InterventionSyntax(spec.to_string());
        let (target, action) = match spec.rsplit_once(':') {
            Some((t, "add")) => (t, Action::Add),
            Some((t, "remove")) => (t, Action::Remove),
            Some(_) => return Err(syntax()),
            None => (spec, Action::Add),
        };
        let (code, period) = target.split_once('@').ok_or_else(syntax)?;
        let code = code.trim();
        if code.is_empty() {
            return Err(syntax());
        }
        let period = Period::from_str(period.trim()).map_err(|_| syntax())?;
        Self::new(catalog, code, period, action)
    }

    pub fn display(&self, catalog: &FeatureCatalog) -> AppliedIntervention {
        AppliedIntervention {
            code: catalog.code(self.feature).to_string(),
            period: self.period,
            action: self.action,
        }
    }

    fn vertex(&self) -> Vertex {
        Vertex::new(self.feature, self.period)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Add => "add",
            Action::Remove => "remove",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PropagationMode {
    #[default]
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub mode: PropagationMode,
    pub n_samples: usize,
    pub seed: u64,
    pub theta: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            mode: PropagationMode::Deterministic,
            n_samples: 200,
            seed: 0,
            theta: 0.5,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config("theta", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

/// Validated interventions, one per vertex.
fn prepare(catalog: &FeatureCatalog, interventions: &[Intervention]) -> Result<Vec<Intervention>> {
    let mut out: Vec<Intervention> = Vec::with_capacity(interventions.len());
    for iv in interventions {
        iv.validate(catalog)?;
        match out.iter().find(|o| o.vertex() == iv.vertex()) {
            Some(o) if o.action != iv.action => {
                return Err(Error::InterventionSyntax(format!(
                    "{}@{}: conflicting add and remove",
                    catalog.code(iv.feature),
                    iv.period
                )));
            }
            Some(_) => {}
            None => out.push(*iv),
        }
    }
    Ok(out)
}

fn apply(factual: &TemporalFeatureVector, interventions: &[Intervention]) -> TemporalFeatureVector {
    let mut cf = factual.clone();
    for iv in interventions {
        cf.set(iv.feature, iv.period, iv.action.value());
    }
    cf
}

fn check_inputs(catalog: &FeatureCatalog, graph: &DependencyGraph, factual: &TemporalFeatureVector) -> Result<()> {
    graph.check_catalog(catalog)?;
    if factual.dim() != catalog.len() {
        return Err(Error::DimensionMismatch {
            expected: catalog.len(),
            actual: factual.dim(),
        });
    }
    Ok(())
}

/// Immutable floor for vertex `v`: present in the factual, or already present
/// at an earlier period of `x`.
fn immutable_floor(factual: &TemporalFeatureVector, x: &TemporalFeatureVector, v: Vertex) -> bool {
    factual.get(v.feature, v.period)
        || Period::ALL
            .into_iter()
            .take_while(|&t| t < v.period)
            .any(|t| x.get(v.feature, t))
}

fn propagated_vertices(graph: &DependencyGraph) -> impl Iterator<Item = Vertex> + '_ {
    graph.vertices().filter(|v| v.period != Period::History)
}

/// Deterministic minimal-change propagation; returns the counterfactual vector.
pub fn propagate_deterministic(
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    interventions: &[Intervention],
) -> Result<TemporalFeatureVector> {
    check_inputs(catalog, graph, factual)?;
    let ivs = prepare(catalog, interventions)?;
    let mut cf = apply(factual, &ivs);
    for v in propagated_vertices(graph) {
        if ivs.iter().any(|iv| iv.vertex() == v) {
            continue;
        }
        let table = graph.require_table(v)?;
        let touched = table
            .parents
            .iter()
            .any(|p| cf.get(p.feature, p.period) != factual.get(p.feature, p.period));
        let mut bit = if touched {
            table.probability_for(&cf) >= 0.5
        } else {
            factual.get(v.feature, v.period)
        };
        if catalog.class(v.feature) == TaxonomyClass::Immutable {
            // Keep factual gaps; only carry forward what the CF itself raised.
            let raised = Period::ALL
                .into_iter()
                .take_while(|&t| t < v.period)
                .any(|t| cf.get(v.feature, t) && !factual.get(v.feature, t));
            bit = bit || raised || factual.get(v.feature, v.period);
        }
        cf.set(v.feature, v.period, bit);
    }
    Ok(cf)
}

/// Monte Carlo sample `k` of the stochastic propagation.
pub fn propagate_sample(
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    interventions: &[Intervention],
    rng: &CounterRng,
    k: u64,
) -> Result<TemporalFeatureVector> {
    check_inputs(catalog, graph, factual)?;
    let ivs = prepare(catalog, interventions)?;
    sample_prepared(catalog, graph, factual, &ivs, rng, k)
}

fn sample_prepared(
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    ivs: &[Intervention],
    rng: &CounterRng,
    k: u64,
) -> Result<TemporalFeatureVector> {
    let mut x = apply(factual, ivs);
    for v in propagated_vertices(graph) {
        if ivs.iter().any(|iv| iv.vertex() == v) {
            continue;
        }
        let p = graph.require_table(v)?.probability_for(&x);
        let u = rng.uniform(x.flat_index(v.feature, v.period) as u64, k);
        let mut bit = u < p;
        if catalog.class(v.feature) == TaxonomyClass::Immutable {
            bit = bit || immutable_floor(factual, &x, v);
        }
        x.set(v.feature, v.period, bit);
    }
    Ok(x)
}

/// Per-bit majority over samples; an exact tie keeps the factual bit.
fn majority(factual: &TemporalFeatureVector, counts: &[usize], n: usize) -> TemporalFeatureVector {
    let mut out = factual.clone();
    for (idx, &c) in counts.iter().enumerate() {
        let (f, t) = out.coordinate(idx);
        match (2 * c).cmp(&n) {
            std::cmp::Ordering::Greater => out.set(f, t, true),
            std::cmp::Ordering::Less => out.set(f, t, false),
            std::cmp::Ordering::Equal => {}
        }
    }
    out
}

/// Stochastic propagation: majority vector and risk summary over `n_samples`.
pub fn propagate_stochastic(
    model: &impl RiskScorer,
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    interventions: &[Intervention],
    n_samples: usize,
    seed: u64,
) -> Result<(TemporalFeatureVector, StochasticSummary)> {
    check_inputs(catalog, graph, factual)?;
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    let ivs = prepare(catalog, interventions)?;
    let rng = CounterRng::new(seed);
    let mut counts = vec![0usize; 3 * factual.dim()];
    let mut scores = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let x = sample_prepared(catalog, graph, factual, &ivs, &rng, k as u64)?;
        for (c, b) in counts.iter_mut().zip(x.flat()) {
            *c += b as usize;
        }
        scores.push(model.try_score(&x)?);
    }
    let n = n_samples as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let stddev = if n_samples > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((
        majority(factual, &counts, n_samples),
        StochasticSummary {
            n_samples,
            mean,
            stddev,
        },
    ))
}

/// Propagate `interventions` from `factual` and package the result.
pub fn propagate(
    model: &impl RiskScorer,
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    interventions: &[Intervention],
    config: &PropagationConfig,
) -> Result<CounterfactualResult> {
    config.validate()?;
    let applied = prepare(catalog, interventions)?
        .iter()
        .map(|iv| iv.display(catalog))
        .collect();
    match config.mode {
        PropagationMode::Deterministic => {
            let cf = propagate_deterministic(catalog, graph, factual, interventions)?;
            evaluate(model, catalog, graph, factual, cf, applied)
        }
        PropagationMode::Stochastic => {
            let (cf, summary) = propagate_stochastic(
                model,
                catalog,
                graph,
                factual,
                interventions,
                config.n_samples,
                config.seed,
            )?;
            let mut result = evaluate(model, catalog, graph, factual, cf, applied)?;
            result.stochastic = Some(summary);
            Ok(result)
        }
    }
}

/// Candidate single interventions: every Intervention feature at History and
/// Past, toggling its factual bit. Ordered by (period, feature).
pub fn candidate_interventions(catalog: &FeatureCatalog, factual: &TemporalFeatureVector) -> Vec<Intervention> {
    let mut out = Vec::new();
    for period in [Period::History, Period::Past] {
        for feature in catalog.of_class(TaxonomyClass::Intervention) {
            let action = if factual.get(feature, period) {
                Action::Remove
            } else {
                Action::Add
            };
            out.push(Intervention {
                feature,
                period,
                action,
            });
        }
    }
    out
}

/// Ranking key: plausible first, then larger risk reduction, then fewer changes.
pub fn rank_order(a: &CounterfactualResult, b: &CounterfactualResult) -> std::cmp::Ordering {
    b.metrics
        .plausible
        .cmp(&a.metrics.plausible)
        .then(b.metrics.predictive_shift.total_cmp(&a.metrics.predictive_shift))
        .then(a.metrics.sparsity.cmp(&b.metrics.sparsity))
}

/// Every intervention set of size `1..=max_interventions` over the candidates,
/// propagated and ranked. Sets that do not lower the risk are dropped.
pub fn search_interventions(
    model: &impl RiskScorer,
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    config: &PropagationConfig,
    max_interventions: usize,
) -> Result<Vec<CounterfactualResult>> {
    let candidates = candidate_interventions(catalog, factual);
    let m = candidates.len();
    let mut results = Vec::new();
    for size in 1..=max_interventions.min(m) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let set: Vec<Intervention> = idx.iter().map(|&i| candidates[i]).collect();
            let r = propagate(model, catalog, graph, factual, &set, config)?;
            if r.metrics.predictive_shift > 0.0 {
                results.push(r);
            }
            let Some(pos) = (0..size).rev().find(|&i| idx[i] < m - size + i) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    results.sort_by(rank_order);
    Ok(results)
}
