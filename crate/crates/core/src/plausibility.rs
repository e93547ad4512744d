//! Plausibility constraints on counterfactual pairs and the cohort-level
//! violation audit.
//!
//! P1 (immutability): a counterfactual may not clear an Immutable bit the
//! patient has, and an Immutable bit it raises must persist to every later
//! period. P2 (temporal coherence): every changed non-Intervention bit needs
//! a directed path in the graph from an intervention bit the counterfactual
//! sets or changes, at the same or an earlier period. P3 (conditional
//! plausibility): the factorized probability of the Last period given the
//! earlier periods exceeds epsilon.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::catalog::{FeatureCatalog, FeatureId, TaxonomyClass};
use crate::cohort::{Cohort, Period, TemporalFeatureVector};
use crate::depgraph::{DependencyGraph, Vertex};
use crate::error::{Error, Result};

/// Floor applied to each per-feature factor of the P3 product.
pub const FACTOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    P1,
    P2,
    P3,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub feature: FeatureId,
    pub code: String,
    pub period: Period,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityVerdict {
    pub p1_ok: bool,
    pub p2_ok: bool,
    pub p3_ok: bool,
    pub p3_probability: f64,
    pub violations: Vec<Violation>,
}

impl PlausibilityVerdict {
    pub fn plausible(&self) -> bool {
        self.p1_ok && self.p2_ok && self.p3_ok
    }
}

fn check_dims(a: &TemporalFeatureVector, b: &TemporalFeatureVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

pub fn check_p1(
    catalog: &FeatureCatalog,
    factual: &TemporalFeatureVector,
    cf: &TemporalFeatureVector,
) -> Result<Vec<Violation>> {
    check_dims(factual, cf)?;
    let mut out = Vec::new();
    for i in catalog.of_class(TaxonomyClass::Immutable) {
        let code = catalog.code(i);
        for t in Period::ALL {
            let violation = |detail: String| Violation {
                constraint: Constraint::P1,
                feature: i,
                code: code.to_string(),
                period: t,
                detail,
            };
            if factual.get(i, t) && !cf.get(i, t) {
                out.push(violation(format!(
                    "{code} removed at {t}, but it is a recorded chronic condition"
                )));
                continue;
            }
            if cf.get(i, t) {
                continue;
            }
            // A bit the counterfactual raised earlier must persist to t.
            if let Some(t0) = Period::ALL
                .into_iter()
                .filter(|&t0| t0 < t)
                .find(|&t0| cf.get(i, t0) && !factual.get(i, t0))
            {
                out.push(violation(format!("{code} added at {t0} but absent at {t}")));
            }
        }
    }
    Ok(out)
}

pub fn check_p2(
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    cf: &TemporalFeatureVector,
) -> Result<Vec<Violation>> {
    check_dims(factual, cf)?;
    let roots: Vec<Vertex> = catalog
        .of_class(TaxonomyClass::Intervention)
        .flat_map(|j| Period::ALL.into_iter().map(move |t| Vertex::new(j, t)))
        .filter(|v| cf.get(v.feature, v.period) || factual.get(v.feature, v.period))
        .collect();
    let mut out = Vec::new();
    for (i, t) in factual.diff(cf) {
        if catalog.class(i) == TaxonomyClass::Intervention {
            continue;
        }
        let target = Vertex::new(i, t);
        let explained = roots.iter().any(|&r| r.period <= t && graph.has_path(r, target));
        if !explained {
            let code = catalog.code(i);
            let verb = if cf.get(i, t) { "added" } else { "removed" };
            out.push(Violation {
                constraint: Constraint::P2,
                feature: i,
                code: code.to_string(),
                period: t,
                detail: format!("{code} {verb} at {t} with no intervention path leading to it"),
            });
        }
    }
    Ok(out)
}

/// Factorized P(l | h, s) from the Last-period tables, each factor floored.
pub fn last_period_probability(graph: &DependencyGraph, cf: &TemporalFeatureVector) -> Result<f64> {
    if cf.dim() != graph.dim() {
        return Err(Error::DimensionMismatch {
            expected: graph.dim(),
            actual: cf.dim(),
        });
    }
    let mut log_p = 0.0;
    for i in 0..graph.dim() {
        let v = Vertex::new(FeatureId(i), Period::Last);
        let p1 = graph.require_table(v)?.probability_for(cf);
        let factor = if cf.get(v.feature, Period::Last) { p1 } else { 1.0 - p1 };
        log_p += factor.max(FACTOR_FLOOR).ln();
    }
    Ok(log_p.exp())
}

pub fn check_p3(graph: &DependencyGraph, cf: &TemporalFeatureVector, epsilon: f64) -> Result<(bool, f64)> {
    let p = last_period_probability(graph, cf)?;
    Ok((p > epsilon, p))
}

/// All three checks, P3 against the graph's epsilon.
pub fn verdict(
    catalog: &FeatureCatalog,
    graph: &DependencyGraph,
    factual: &TemporalFeatureVector,
    cf: &TemporalFeatureVector,
) -> Result<PlausibilityVerdict> {
    let p1 = check_p1(catalog, factual, cf)?;
    let p2 = check_p2(catalog, graph, factual, cf)?;
    let (p3_ok, p3_probability) = check_p3(graph, cf, graph.epsilon)?;
    let mut violations = p1;
    let p1_ok = violations.is_empty();
    let p2_ok = p2.is_empty();
    violations.extend(p2);
    if !p3_ok {
        violations.push(Violation {
            constraint: Constraint::P3,
            feature: FeatureId(0),
            code: "*".into(),
            period: Period::Last,
            detail: format!(
                "Last-period probability {p3_probability:.3e} is not above epsilon {:.3e}",
                graph.epsilon
            ),
        });
    }
    Ok(PlausibilityVerdict {
        p1_ok,
        p2_ok,
        p3_ok,
        p3_probability,
        violations,
    })
}

/// Set epsilon to the given quantile (e.g. 0.01) of the factorized
/// probabilities of the cohort's own records.
pub fn calibrate_epsilon(graph: &DependencyGraph, cohort: &Cohort, quantile: f64) -> Result<f64> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::config("quantile", "must lie in [0, 1]"));
    }
    let mut probs = cohort
        .patients()
        .iter()
        .map(|p| last_period_probability(graph, &p.features))
        .collect::<Result<Vec<f64>>>()?;
    probs.sort_by(f64::total_cmp);
    let rank = ((quantile * probs.len() as f64).ceil() as usize).clamp(1, probs.len());
    Ok(probs[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub numerator: usize,
    pub denominator: usize,
    /// None when the denominator is zero.
    pub rate: Option<f64>,
}

impl RateCell {
    pub fn new(numerator: usize, denominator: usize) -> Self {
        Self {
            numerator,
            denominator,
            rate: (denominator > 0).then(|| numerator as f64 / denominator as f64),
        }
    }

    fn render_rate(&self) -> String {
        self.rate.map_or("n/a".to_string(), |r| format!("{:.1}", 100.0 * r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLevel {
    pub p1: RateCell,
    pub p2: RateCell,
    pub any: RateCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRate {
    pub code: String,
    #[serde(flatten)]
    pub cell: RateCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub n_patients: usize,
    pub patient_level: PatientLevel,
    pub feature_level_p1: Vec<FeatureRate>,
    pub feature_level_p2: Vec<FeatureRate>,
}

impl ViolationReport {
    pub fn p1(&self, code: &str) -> Option<&RateCell> {
        self.feature_level_p1.iter().find(|f| f.code == code).map(|f| &f.cell)
    }

    pub fn p2(&self, code: &str) -> Option<&RateCell> {
        self.feature_level_p2.iter().find(|f| f.code == code).map(|f| &f.cell)
    }
}

/// Rates at which removal-style counterfactuals of each Last-period code
/// would violate P1 (Immutable) or P2 (Controllable without a pathway
/// intervention in History), computed from factual bits.
pub fn audit_naive(cohort: &Cohort) -> Result<ViolationReport> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let cat = cohort.catalog();
    let immutable: Vec<FeatureId> = cat.of_class(TaxonomyClass::Immutable).collect();
    let controllable: Vec<(FeatureId, Vec<FeatureId>)> = cat
        .of_class(TaxonomyClass::Controllable)
        .map(|j| (j, cat.interventions_for(j).collect()))
        .collect();

    let mut p1_num = vec![0usize; immutable.len()];
    let mut p1_den = vec![0usize; immutable.len()];
    let mut p2_num = vec![0usize; controllable.len()];
    let mut p2_den = vec![0usize; controllable.len()];
    let (mut pat_p1, mut pat_p2, mut pat_any) = (0usize, 0usize, 0usize);
    for p in cohort.patients() {
        let x = &p.features;
        let mut has_p1 = false;
        for (k, &i) in immutable.iter().enumerate() {
            if x.get(i, Period::Last) {
                p1_den[k] += 1;
                if x.get(i, Period::History) {
                    p1_num[k] += 1;
                    has_p1 = true;
                }
            }
        }
        let mut has_p2 = false;
        for (k, (j, drugs)) in controllable.iter().enumerate() {
            if x.get(*j, Period::Last) {
                p2_den[k] += 1;
                if !drugs.iter().any(|&r| x.get(r, Period::History)) {
                    p2_num[k] += 1;
                    has_p2 = true;
                }
            }
        }
        pat_p1 += has_p1 as usize;
        pat_p2 += has_p2 as usize;
        pat_any += (has_p1 || has_p2) as usize;
    }
    let n = cohort.len();
    let rows = |ids: &mut dyn Iterator<Item = FeatureId>, num: &[usize], den: &[usize]| -> Vec<FeatureRate> {
        ids.enumerate()
            .map(|(k, f)| FeatureRate {
                code: cat.code(f).to_string(),
                cell: RateCell::new(num[k], den[k]),
            })
            .collect()
    };
    Ok(ViolationReport {
        n_patients: n,
        patient_level: PatientLevel {
            p1: RateCell::new(pat_p1, n),
            p2: RateCell::new(pat_p2, n),
            any: RateCell::new(pat_any, n),
        },
        feature_level_p1: rows(&mut immutable.iter().copied(), &p1_num, &p1_den),
        feature_level_p2: rows(&mut controllable.iter().map(|(j, _)| *j), &p2_num, &p2_den),
    })
}

pub fn render_report(report: &ViolationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Patient-level violations (n = {})", report.n_patients);
    let _ = writeln!(out, "  {:<22} {:>8} {:>8}", "constraint", "count", "rate %");
    for (name, cell) in [
        ("P1 (immutability)", &report.patient_level.p1),
        ("P2 (temporal)", &report.patient_level.p2),
        ("Any violation", &report.patient_level.any),
    ] {
        let _ = writeln!(out, "  {:<22} {:>8} {:>8}", name, cell.numerator, cell.render_rate());
    }
    for (title, rows) in [
        ("Feature-level P1 (Immutable)", &report.feature_level_p1),
        ("Feature-level P2 (Controllable)", &report.feature_level_p2),
    ] {
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "  {:<22} {:>8} {:>8} {:>8}", "feature", "num", "den", "rate %");
        for r in rows.iter() {
            let _ = writeln!(
                out,
                "  {:<22} {:>8} {:>8} {:>8}",
                r.code,
                r.cell.numerator,
                r.cell.denominator,
                r.cell.render_rate()
            );
        }
    }
    out
}
