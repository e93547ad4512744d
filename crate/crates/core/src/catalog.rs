//! Feature universe, taxonomy partition and intervention pathways.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index of a feature within one catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureId(pub usize);

impl FeatureId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyClass {
    /// Chronic diagnoses: once present they stay present.
    Immutable,
    /// Labs and acute events that may change across periods.
    Controllable,
    /// Medications and procedures; the only directly manipulable bits.
    Intervention,
}

impl fmt::Display for TaxonomyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaxonomyClass::Immutable => "immutable",
            TaxonomyClass::Controllable => "controllable",
            TaxonomyClass::Intervention => "intervention",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feature {
    pub id: FeatureId,
    pub code: String,
    pub label: String,
    pub class: TaxonomyClass,
}

/// An intervention -> controllable edge from clinical knowledge. The
/// mechanism text is documentation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionPathway {
    pub intervention: FeatureId,
    pub target: FeatureId,
    pub mechanism: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureRecord {
    code: String,
    #[serde(default)]
    label: String,
    class: TaxonomyClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PathwayRecord {
    intervention: String,
    target: String,
    #[serde(default)]
    mechanism: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    features: Vec<FeatureRecord>,
    #[serde(default)]
    pathways: Vec<PathwayRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureCatalog {
    features: Vec<Feature>,
    pathways: Vec<InterventionPathway>,
    by_code: HashMap<String, FeatureId>,
}

impl FeatureCatalog {
    /// Parse and validate a catalog file (JSON).
    pub fn from_json(source: &str) -> Result<Self> {
        let file: CatalogFile = serde_json::from_str(source).map_err(|e| classify_parse_error(source, e))?;
        Self::from_records(file)
    }

    fn from_records(file: CatalogFile) -> Result<Self> {
        let mut features = Vec::with_capacity(file.features.len());
        let mut by_code = HashMap::with_capacity(file.features.len());
        for (i, rec) in file.features.into_iter().enumerate() {
            if rec.code.is_empty() {
                return Err(Error::EmptyCode(i));
            }
            if by_code.insert(rec.code.clone(), FeatureId(i)).is_some() {
                return Err(Error::DuplicateCode(rec.code));
            }
            let label = if rec.label.is_empty() {
                rec.code.clone()
            } else {
                rec.label
            };
            features.push(Feature {
                id: FeatureId(i),
                code: rec.code,
                label,
                class: rec.class,
            });
        }

        let mut catalog = FeatureCatalog {
            features,
            pathways: Vec::new(),
            by_code,
        };
        let mut seen = HashSet::new();
        for p in file.pathways {
            let invalid = |reason: &str| Error::InvalidPathway {
                intervention: p.intervention.clone(),
                target: p.target.clone(),
                reason: reason.to_string(),
            };
            let intervention = catalog
                .id(&p.intervention)
                .ok_or_else(|| invalid("pathway references unknown feature"))?;
            let target = catalog
                .id(&p.target)
                .ok_or_else(|| invalid("pathway references unknown feature"))?;
            if catalog.class(intervention) != TaxonomyClass::Intervention {
                return Err(invalid("pathway source not Intervention"));
            }
            if catalog.class(target) != TaxonomyClass::Controllable {
                return Err(invalid("pathway target not Controllable"));
            }
            if !seen.insert((intervention, target)) {
                return Err(invalid("duplicate pathway"));
            }
            catalog.pathways.push(InterventionPathway {
                intervention,
                target,
                mechanism: p.mechanism,
            });
        }
        Ok(catalog)
    }

    /// Serialize back to the catalog file format.
    pub fn to_json(&self) -> String {
        let file = CatalogFile {
            features: self
                .features
                .iter()
                .map(|f| FeatureRecord {
                    code: f.code.clone(),
                    label: f.label.clone(),
                    class: f.class,
                })
                .collect(),
            pathways: self
                .pathways
                .iter()
                .map(|p| PathwayRecord {
                    intervention: self.code(p.intervention).to_string(),
                    target: self.code(p.target).to_string(),
                    mechanism: p.mechanism.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("catalog serializes")
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn ids(&self) -> impl Iterator<Item = FeatureId> + '_ {
        (0..self.features.len()).map(FeatureId)
    }

    pub fn feature(&self, id: FeatureId) -> &Feature {
        &self.features[id.0]
    }

    pub fn id(&self, code: &str) -> Option<FeatureId> {
        self.by_code.get(code).copied()
    }

    /// Like [`id`](Self::id) but reports unknown codes as an error.
    pub fn require(&self, code: &str) -> Result<FeatureId> {
        self.id(code).ok_or_else(|| Error::UnknownFeature(code.to_string()))
    }

    pub fn code(&self, id: FeatureId) -> &str {
        &self.features[id.0].code
    }

    pub fn class(&self, id: FeatureId) -> TaxonomyClass {
        self.features[id.0].class
    }

    pub fn of_class(&self, class: TaxonomyClass) -> impl Iterator<Item = FeatureId> + '_ {
        self.features.iter().filter(move |f| f.class == class).map(|f| f.id)
    }

    pub fn pathways(&self) -> &[InterventionPathway] {
        &self.pathways
    }

    /// Interventions with a pathway into `target`.
    pub fn interventions_for(&self, target: FeatureId) -> impl Iterator<Item = FeatureId> + '_ {
        self.pathways
            .iter()
            .filter(move |p| p.target == target)
            .map(|p| p.intervention)
    }

    /// The fourteen concepts named for the Long COVID heart-failure application.
    pub fn default_catalog() -> Self {
        let f = |code: &str, label: &str, class| FeatureRecord {
            code: code.into(),
            label: label.into(),
            class,
        };
        use TaxonomyClass::*;
        let features = vec![
            f("E11", "Type 2 diabetes mellitus", Immutable),
            f("I10", "Essential hypertension", Immutable),
            f("N18", "Chronic kidney disease", Immutable),
            f("I50", "Heart failure", Immutable),
            f("E66", "Obesity", Immutable),
            f("Glucose_H", "Elevated glucose", Controllable),
            f("Creatinine_H", "Elevated creatinine", Controllable),
            f("Troponin_H", "Elevated troponin", Controllable),
            f("N17", "Acute kidney injury", Controllable),
            f("Lisinopril", "Lisinopril (ACE inhibitor)", Intervention),
            f("Insulin", "Insulin", Intervention),
            f("Metoprolol", "Metoprolol (beta blocker)", Intervention),
            f("Atorvastatin", "Atorvastatin (statin)", Intervention),
            f("LoopDiuretic", "Loop diuretic", Intervention),
        ];
        let p = |i: &str, t: &str, m: &str| PathwayRecord {
            intervention: i.into(),
            target: t.into(),
            mechanism: m.into(),
        };
        let pathways = vec![
            p("Insulin", "Glucose_H", "glycemic control"),
            p("Lisinopril", "N17", "renoprotection: AKI prevention"),
            p("Lisinopril", "Creatinine_H", "renoprotection: creatinine stabilization"),
            p("LoopDiuretic", "Creatinine_H", "volume management"),
        ];
        Self::from_records(CatalogFile { features, pathways }).expect("default catalog is valid")
    }
}

fn classify_parse_error(source: &str, err: serde_json::Error) -> Error {
    // A feature entry without "class" is a taxonomy error rather than a syntax one.
    if err.to_string().contains("missing field `class`") {
        if let Ok(raw) = serde_json::from_str::<serde_json::Value>(source) {
            let missing = raw["features"].as_array().and_then(|fs| {
                fs.iter()
                    .find(|f| f.get("class").is_none())
                    .and_then(|f| f["code"].as_str().map(str::to_string))
            });
            if let Some(code) = missing {
                return Error::MissingClass(code);
            }
        }
    }
    Error::CatalogFormat(err.to_string())
}
