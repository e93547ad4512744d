//! Naive counterfactual baseline: the nearest binary vector whose risk falls
//! below the threshold, searched with no regard for the feature taxonomy.

use serde::{Deserialize, Serialize};

use crate::catalog::FeatureCatalog;
use crate::cohort::TemporalFeatureVector;
use crate::counterfactual::{evaluate, CounterfactualResult};
use crate::depgraph::DependencyGraph;
use crate::error::{Error, Result};
use crate::riskmodel::RiskScorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Number of flipped bits.
    #[default]
    L0,
    /// Sum of absolute differences; equal to L0 on binary vectors.
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Exhaustive when the vector has at most 20 bits, greedy otherwise.
    #[default]
    Auto,
    Greedy,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NaiveCfConfig {
    pub theta: f64,
    pub distance: Distance,
    pub max_changes: usize,
    pub search: SearchMode,
}

impl Default for NaiveCfConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            distance: Distance::L0,
            max_changes: 5,
            search: SearchMode::Auto,
        }
    }
}

impl NaiveCfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config("theta", "must lie strictly between 0 and 1"));
        }
        if self.max_changes == 0 {
            return Err(Error::config("max_changes", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NaiveOutcome {
    Found(Box<CounterfactualResult>),
    /// No flip set within `max_changes` crosses the threshold.
    NotFound {
        best_score: f64,
    },
}

/// Flat (period-major) indices to flip, or the lowest risk reached when the
/// threshold cannot be crossed.
pub fn search_flips(
    model: &impl RiskScorer,
    factual: &TemporalFeatureVector,
    config: &NaiveCfConfig,
) -> Result<std::result::Result<Vec<usize>, f64>> {
    config.validate()?;
    let y = model.try_score(factual)?;
    if y < config.theta {
        return Ok(Ok(Vec::new()));
    }
    let bits = 3 * factual.dim();
    let exhaustive = match config.search {
        SearchMode::Exhaustive => true,
        SearchMode::Greedy => false,
        SearchMode::Auto => bits <= 20,
    };
    Ok(if exhaustive {
        exhaustive_search(model, factual, config)
    } else {
        greedy_search(model, factual, config)
    })
}

fn flipped(factual: &TemporalFeatureVector, flips: &[usize]) -> TemporalFeatureVector {
    let mut v = factual.clone();
    for &k in flips {
        let (f, t) = v.coordinate(k);
        v.flip(f, t);
    }
    v
}

fn greedy_search(
    model: &impl RiskScorer,
    factual: &TemporalFeatureVector,
    config: &NaiveCfConfig,
) -> std::result::Result<Vec<usize>, f64> {
    let bits = 3 * factual.dim();
    let mut current = factual.clone();
    let mut score = model.score(&current);
    let mut flips = Vec::new();
    while flips.len() < config.max_changes {
        let mut best: Option<(f64, usize)> = None;
        for k in (0..bits).filter(|k| !flips.contains(k)) {
            let (f, t) = current.coordinate(k);
            current.flip(f, t);
            let s = model.score(&current);
            current.flip(f, t);
            if best.is_none_or(|(b, _)| s < b) {
                best = Some((s, k));
            }
        }
        match best {
            Some((s, k)) if s < score => {
                let (f, t) = current.coordinate(k);
                current.flip(f, t);
                score = s;
                flips.push(k);
                if score < config.theta {
                    flips.sort_unstable();
                    return Ok(flips);
                }
            }
            _ => break,
        }
    }
    Err(score)
}

fn exhaustive_search(
    model: &impl RiskScorer,
    factual: &TemporalFeatureVector,
    config: &NaiveCfConfig,
) -> std::result::Result<Vec<usize>, f64> {
    let bits = 3 * factual.dim();
    let mut best_score = model.score(factual);
    for k in 1..=config.max_changes.min(bits) {
        // Lexicographic k-combinations of 0..bits.
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let s = model.score(&flipped(factual, &idx));
            if s < config.theta {
                return Ok(idx);
            }
            best_score = best_score.min(s);
            let Some(pos) = (0..k).rev().find(|&i| idx[i] < bits - k + i) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    Err(best_score)
}

pub fn generate_naive(
    model: &impl RiskScorer,
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    config: &NaiveCfConfig,
) -> Result<NaiveOutcome> {
    match search_flips(model, factual, config)? {
        Ok(flips) => {
            let cf = flipped(factual, &flips);
            let result = evaluate(model, catalog, graph, factual, cf, Vec::new())?;
            Ok(NaiveOutcome::Found(Box::new(result)))
        }
        Err(best_score) => Ok(NaiveOutcome::NotFound { best_score }),
    }
}
