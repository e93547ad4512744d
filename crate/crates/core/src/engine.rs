//! One request engine behind both frontends (command line and HTTP), so the
//! two produce byte-identical JSON for identical inputs.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cascade::{cascade_report, confounding_profile, CascadeRoles, CascadeStep, ConfoundingProfile};
use crate::catalog::{FeatureCatalog, TaxonomyClass};
use crate::cohort::{load_cohort, Cohort, CohortFormat, Patient, Period};
use crate::counterfactual::CounterfactualResult;
use crate::depgraph::DependencyGraph;
use crate::error::{Error, Result};
use crate::naivecf::{generate_naive, NaiveCfConfig, NaiveOutcome};
use crate::plausibility::{audit_naive, ViolationReport};
use crate::riskmodel::RiskScorer;
use crate::seqcf::{propagate, search_interventions, Action, Intervention, PropagationConfig, PropagationMode};
use crate::RiskModel;

pub const CATALOG_FILE: &str = "catalog.json";
pub const COHORT_FILE: &str = "cohort.csv";
pub const GRAPH_FILE: &str = "graph.json";
pub const MODEL_FILE: &str = "model.json";

/// A mutually consistent catalog, cohort, graph and model.
#[derive(Debug, Clone)]
pub struct Artifacts {
    catalog: Arc<FeatureCatalog>,
    cohort: Cohort,
    graph: DependencyGraph,
    model: RiskModel,
}

impl Artifacts {
    pub fn new(cohort: Cohort, graph: DependencyGraph, model: RiskModel) -> Result<Self> {
        let catalog = cohort.catalog_arc().clone();
        graph
            .check_catalog(&catalog)
            .map_err(|e| Error::ArtifactMismatch(format!("graph: {e}")))?;
        if model.dim() != catalog.len() {
            return Err(Error::ArtifactMismatch(format!(
                "model has {} features, catalog has {}",
                model.dim(),
                catalog.len()
            )));
        }
        Ok(Self {
            catalog,
            cohort,
            graph,
            model,
        })
    }

    /// Load the four standard files from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        let catalog = Arc::new(FeatureCatalog::from_json(&read(CATALOG_FILE)?)?);
        let load = load_cohort(&read(COHORT_FILE)?, catalog.clone(), CohortFormat::Csv)?;
        if !load.missing_columns.is_empty() {
            return Err(Error::ArtifactMismatch(format!(
                "cohort lacks columns: {}",
                load.missing_columns.join(", ")
            )));
        }
        let graph = DependencyGraph::from_json(&read(GRAPH_FILE)?, &catalog)?;
        let model = RiskModel::from_json(&read(MODEL_FILE)?)?;
        Self::new(load.cohort, graph, model)
    }

    pub fn catalog(&self) -> &FeatureCatalog {
        &self.catalog
    }

    pub fn cohort(&self) -> &Cohort {
        &self.cohort
    }

    pub fn graph(&self) -> &DependencyGraph {
        &self.graph
    }

    pub fn model(&self) -> &RiskModel {
        &self.model
    }

    pub fn patient(&self, id: &str) -> Result<&Patient> {
        self.cohort
            .patient(id)
            .ok_or_else(|| Error::UnknownPatient(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CfMode {
    Naive,
    #[default]
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub code: String,
    pub period: Period,
    #[serde(default = "default_action")]
    pub action: Action,
}

fn default_action() -> Action {
    Action::Add
}

/// A counterfactual query. Propagation is stochastic when `propagation` says
/// so, or when it is omitted and `samples` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfRequest {
    pub patient_id: String,
    #[serde(default)]
    pub mode: CfMode,
    #[serde(default)]
    pub interventions: Vec<InterventionSpec>,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub propagation: Option<PropagationMode>,
    /// Naive mode only.
    #[serde(default)]
    pub max_changes: Option<usize>,
}

impl CfRequest {
    pub fn propagation_config(&self) -> Result<PropagationConfig> {
        let defaults = PropagationConfig::default();
        let mode = self.propagation.unwrap_or(if self.samples.is_some() {
            PropagationMode::Stochastic
        } else {
            PropagationMode::Deterministic
        });
        let config = PropagationConfig {
            mode,
            n_samples: self.samples.unwrap_or(defaults.n_samples),
            seed: self.seed.unwrap_or(defaults.seed),
            theta: self.theta.unwrap_or(defaults.theta),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn naive_config(&self) -> Result<NaiveCfConfig> {
        let defaults = NaiveCfConfig::default();
        let config = NaiveCfConfig {
            theta: self.theta.unwrap_or(defaults.theta),
            max_changes: self.max_changes.unwrap_or(defaults.max_changes),
            ..defaults
        };
        config.validate()?;
        Ok(config)
    }

    pub fn interventions(&self, catalog: &FeatureCatalog) -> Result<Vec<Intervention>> {
        self.interventions
            .iter()
            .map(|s| Intervention::new(catalog, &s.code, s.period, s.action))
            .collect()
    }
}

pub fn run_counterfactual(art: &Artifacts, req: &CfRequest) -> Result<CounterfactualResult> {
    let patient = art.patient(&req.patient_id)?;
    match req.mode {
        CfMode::Naive => {
            if !req.interventions.is_empty() {
                return Err(Error::config("interventions", "naive mode takes no interventions"));
            }
            let config = req.naive_config()?;
            match generate_naive(&art.model, &art.catalog, &art.graph, &patient.features, &config)? {
                NaiveOutcome::Found(r) => Ok(*r),
                NaiveOutcome::NotFound { best_score } => Err(Error::NoCounterfactual { best_score }),
            }
        }
        CfMode::Sequential => {
            let config = req.propagation_config()?;
            let ivs = req.interventions(&art.catalog)?;
            propagate(&art.model, &art.catalog, &art.graph, &patient.features, &ivs, &config)
        }
    }
}

pub fn run_search(
    art: &Artifacts,
    patient_id: &str,
    config: &PropagationConfig,
    max_interventions: usize,
) -> Result<Vec<CounterfactualResult>> {
    config.validate()?;
    let patient = art.patient(patient_id)?;
    search_interventions(
        &art.model,
        &art.catalog,
        &art.graph,
        &patient.features,
        config,
        max_interventions,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub y: bool,
    pub y_hat: f64,
    /// Any Immutable condition recorded at any period.
    pub has_immutable_conditions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPage {
    /// Cohort size.
    pub total: usize,
    /// Rows passing `min_risk`, before paging.
    pub matched: usize,
    pub offset: usize,
    pub limit: usize,
    pub rows: Vec<PatientSummary>,
}

fn summary(art: &Artifacts, p: &Patient) -> PatientSummary {
    let immutable = art
        .catalog
        .of_class(TaxonomyClass::Immutable)
        .any(|f| Period::ALL.into_iter().any(|t| p.features.get(f, t)));
    PatientSummary {
        patient_id: p.patient_id.clone(),
        y: p.outcome,
        y_hat: art.model.score(&p.features),
        has_immutable_conditions: immutable,
    }
}

/// Patients in cohort order, filtered by risk and paged.
pub fn list_patients(art: &Artifacts, limit: usize, offset: usize, min_risk: Option<f64>) -> Result<PatientPage> {
    if let Some(r) = min_risk {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config("min_risk", "must lie in [0, 1]"));
        }
    }
    let matched: Vec<PatientSummary> = art
        .cohort
        .patients()
        .iter()
        .map(|p| summary(art, p))
        .filter(|s| min_risk.is_none_or(|r| s.y_hat >= r))
        .collect();
    Ok(PatientPage {
        total: art.cohort.len(),
        matched: matched.len(),
        offset,
        limit,
        rows: matched.into_iter().skip(offset).take(limit).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBit {
    pub code: String,
    pub class: TaxonomyClass,
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDetail {
    pub patient_id: String,
    pub y: bool,
    pub y_hat: f64,
    pub history: Vec<FeatureBit>,
    pub past: Vec<FeatureBit>,
    pub last: Vec<FeatureBit>,
}

pub fn patient_detail(art: &Artifacts, id: &str) -> Result<PatientDetail> {
    let p = art.patient(id)?;
    let block = |t: Period| {
        art.catalog
            .features()
            .iter()
            .map(|f| FeatureBit {
                code: f.code.clone(),
                class: f.class,
                value: p.features.get(f.id, t),
            })
            .collect()
    };
    Ok(PatientDetail {
        patient_id: p.patient_id.clone(),
        y: p.outcome,
        y_hat: art.model.score(&p.features),
        history: block(Period::History),
        past: block(Period::Past),
        last: block(Period::Last),
    })
}

pub fn audit(cohort: &Cohort) -> Result<ViolationReport> {
    audit_naive(cohort)
}

/// Insulin among diabetics: the confounding-by-indication profile.
const TREATMENT: (&str, Period) = ("Insulin", Period::History);
const POPULATION: (&str, Period) = ("E11", Period::History);
const STRATIFIERS: [(&str, Period); 4] = [
    ("N18", Period::History),
    ("N17", Period::History),
    ("I50", Period::History),
    ("Glucose_H", Period::Last),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeSummary {
    pub steps: Vec<CascadeStep>,
    /// Absent when the catalog lacks one of the profile's codes.
    pub confounding: Option<ConfoundingProfile>,
}

pub fn cascade(cohort: &Cohort) -> Result<CascadeSummary> {
    let steps = cascade_report(cohort, &CascadeRoles::default())?;
    let cat = cohort.catalog();
    let lookup = |(code, t): (&str, Period)| cat.id(code).map(|f| (f, t));
    let stratifiers: Option<Vec<_>> = STRATIFIERS.into_iter().map(lookup).collect();
    let confounding = match (lookup(TREATMENT), lookup(POPULATION), stratifiers) {
        (Some(tr), Some(pop), Some(st)) => Some(confounding_profile(cohort, tr, &st, Some(pop))?),
        _ => None,
    };
    Ok(CascadeSummary { steps, confounding })
}

/// The canonical JSON rendering shared by every frontend.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("engine values serialize");
    s.push('\n');
    s
}
