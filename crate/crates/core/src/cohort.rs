//! Temporal feature vectors, patients and cohort files.
//!
//! A patient is observed in three periods relative to the index event:
//! History (before it), Past (between index events) and Last (after the
//! final index event, before the outcome). Each period carries one presence
//! bit per catalog feature. An absent lab code means "normal or unmeasured";
//! the two are not distinguished.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::{FeatureCatalog, FeatureId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    History,
    Past,
    Last,
}

impl Period {
    pub const ALL: [Period; 3] = [Period::History, Period::Past, Period::Last];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Period> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Period::History => "history",
            Period::Past => "past",
            Period::Last => "last",
        }
    }

    /// The period immediately before this one.
    pub fn previous(self) -> Option<Period> {
        match self {
            Period::History => None,
            Period::Past => Some(Period::History),
            Period::Last => Some(Period::Past),
        }
    }

    /// Periods strictly after this one.
    pub fn later(self) -> impl Iterator<Item = Period> {
        Self::ALL.into_iter().filter(move |p| *p > self)
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Period {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "history" | "h" => Ok(Period::History),
            "past" | "s" => Ok(Period::Past),
            "last" | "l" => Ok(Period::Last),
            other => Err(Error::CohortFormat(format!("unparseable period `{other}`"))),
        }
    }
}

/// Presence bits for one patient in each of the three periods.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TemporalFeatureVector {
    periods: [Vec<bool>; 3],
}

impl TemporalFeatureVector {
    pub fn zeros(d: usize) -> Self {
        Self {
            periods: [vec![false; d], vec![false; d], vec![false; d]],
        }
    }

    pub fn from_periods(history: Vec<bool>, past: Vec<bool>, last: Vec<bool>) -> Result<Self> {
        let d = history.len();
        for v in [&past, &last] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        Ok(Self {
            periods: [history, past, last],
        })
    }

    /// Build from a period-major flat slice of length `3d`.
    pub fn from_flat(bits: &[bool]) -> Result<Self> {
        if !bits.len().is_multiple_of(3) {
            return Err(Error::DimensionMismatch {
                expected: bits.len() / 3 * 3,
                actual: bits.len(),
            });
        }
        let d = bits.len() / 3;
        Ok(Self {
            periods: [bits[..d].to_vec(), bits[d..2 * d].to_vec(), bits[2 * d..].to_vec()],
        })
    }

    /// Number of features `d`.
    pub fn dim(&self) -> usize {
        self.periods[0].len()
    }

    pub fn get(&self, feature: FeatureId, period: Period) -> bool {
        self.periods[period.index()][feature.0]
    }

    pub fn set(&mut self, feature: FeatureId, period: Period, value: bool) {
        self.periods[period.index()][feature.0] = value;
    }

    pub fn period(&self, period: Period) -> &[bool] {
        &self.periods[period.index()]
    }

    /// Period-major index of `(feature, period)` in `0..3d`.
    pub fn flat_index(&self, feature: FeatureId, period: Period) -> usize {
        period.index() * self.dim() + feature.0
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn coordinate(&self, flat: usize) -> (FeatureId, Period) {
        let d = self.dim();
        (FeatureId(flat % d), Period::from_index(flat / d).expect("index < 3d"))
    }

    pub fn flat(&self) -> impl Iterator<Item = bool> + '_ {
        self.periods.iter().flat_map(|p| p.iter().copied())
    }

    pub fn flip(&mut self, feature: FeatureId, period: Period) {
        let b = &mut self.periods[period.index()][feature.0];
        *b = !*b;
    }

    /// Coordinates where `self` and `other` differ, ordered by (period, feature).
    pub fn diff(&self, other: &Self) -> Vec<(FeatureId, Period)> {
        let mut out = Vec::new();
        for p in Period::ALL {
            for (i, (a, b)) in self.periods[p.index()]
                .iter()
                .zip(&other.periods[p.index()])
                .enumerate()
            {
                if a != b {
                    out.push((FeatureId(i), p));
                }
            }
        }
        out
    }

    /// L0 distance.
    pub fn hamming(&self, other: &Self) -> usize {
        self.flat().zip(other.flat()).filter(|(a, b)| a != b).count()
    }
}

#[derive(Serialize, Deserialize)]
struct BitsRepr {
    history: Vec<u8>,
    past: Vec<u8>,
    last: Vec<u8>,
}

impl Serialize for TemporalFeatureVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let b = |v: &Vec<bool>| v.iter().map(|&x| x as u8).collect();
        BitsRepr {
            history: b(&self.periods[0]),
            past: b(&self.periods[1]),
            last: b(&self.periods[2]),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TemporalFeatureVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = BitsRepr::deserialize(d)?;
        let conv = |v: Vec<u8>| -> std::result::Result<Vec<bool>, D::Error> {
            v.into_iter()
                .map(|x| match x {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(serde::de::Error::custom("non-binary bit")),
                })
                .collect()
        };
        TemporalFeatureVector::from_periods(conv(r.history)?, conv(r.past)?, conv(r.last)?)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub features: TemporalFeatureVector,
    /// 1 = case (Long COVID heart failure).
    pub outcome: bool,
}

/// A validated set of patients over one catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    catalog: Arc<FeatureCatalog>,
    patients: Vec<Patient>,
}

impl Cohort {
    pub fn new(catalog: Arc<FeatureCatalog>, patients: Vec<Patient>) -> Result<Self> {
        let d = catalog.len();
        let mut ids = HashSet::with_capacity(patients.len());
        for p in &patients {
            if p.patient_id.is_empty() {
                return Err(Error::CohortFormat("empty patient_id".into()));
            }
            if !ids.insert(p.patient_id.as_str()) {
                return Err(Error::DuplicatePatient(p.patient_id.clone()));
            }
            if p.features.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: p.features.dim(),
                });
            }
        }
        Ok(Self { catalog, patients })
    }

    pub fn catalog(&self) -> &FeatureCatalog {
        &self.catalog
    }

    pub fn catalog_arc(&self) -> &Arc<FeatureCatalog> {
        &self.catalog
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient(&self, id: &str) -> Option<&Patient> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn cases(&self) -> usize {
        self.patients.iter().filter(|p| p.outcome).count()
    }

    /// Keep the patients matching `keep`, preserving order.
    pub fn filtered(&self, keep: impl Fn(&Patient) -> bool) -> Cohort {
        Cohort {
            catalog: Arc::clone(&self.catalog),
            patients: self.patients.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    /// Cohort with the given patients reordered/subset by index.
    pub fn select(&self, indices: &[usize]) -> Cohort {
        Cohort {
            catalog: Arc::clone(&self.catalog),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }
}

/// Serialization format of a cohort file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortFormat {
    Csv,
    JsonLines,
}

impl CohortFormat {
    /// `.jsonl` selects JSON lines; everything else is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => CohortFormat::JsonLines,
            _ => CohortFormat::Csv,
        }
    }
}

/// Result of loading a cohort file.
#[derive(Debug, Clone)]
pub struct CohortLoad {
    pub cohort: Cohort,
    /// `<code>__<period>` columns absent from the file; their bits default to 0.
    pub missing_columns: Vec<String>,
}

pub fn column_name(code: &str, period: Period) -> String {
    format!("{code}__{period}")
}

fn parse_bit(cell: &str, row: usize) -> Result<bool> {
    match cell.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::NonBinary { row }),
    }
}

pub fn load_cohort(source: &str, catalog: Arc<FeatureCatalog>, format: CohortFormat) -> Result<CohortLoad> {
    match format {
        CohortFormat::Csv => load_csv(source, catalog),
        CohortFormat::JsonLines => load_jsonl(source, catalog),
    }
}

enum Column {
    Id,
    Outcome,
    Bit(FeatureId, Period),
}

fn load_csv(source: &str, catalog: Arc<FeatureCatalog>) -> Result<CohortLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source.as_bytes());
    let headers = reader.headers()?.clone();
    let mut columns = Vec::with_capacity(headers.len());
    let mut present = HashSet::new();
    for h in headers.iter() {
        let col = match h {
            "patient_id" => Column::Id,
            "outcome" => Column::Outcome,
            _ => {
                let (code, suffix) = h
                    .rsplit_once("__")
                    .ok_or_else(|| Error::CohortFormat(format!("unknown column `{h}`")))?;
                let period: Period = suffix
                    .parse()
                    .map_err(|_| Error::CohortFormat(format!("unparseable period suffix in column `{h}`")))?;
                let id = catalog
                    .id(code)
                    .ok_or_else(|| Error::CohortFormat(format!("unknown column `{h}`")))?;
                if !present.insert((id, period)) {
                    return Err(Error::CohortFormat(format!("duplicate column `{h}`")));
                }
                Column::Bit(id, period)
            }
        };
        columns.push(col);
    }
    if !columns.iter().any(|c| matches!(c, Column::Id)) {
        return Err(Error::CohortFormat("missing `patient_id` column".into()));
    }
    if !columns.iter().any(|c| matches!(c, Column::Outcome)) {
        return Err(Error::CohortFormat("missing `outcome` column".into()));
    }

    let d = catalog.len();
    let mut patients = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != columns.len() {
            return Err(Error::CohortFormat(format!(
                "row {row} has {} cells, header has {}",
                record.len(),
                columns.len()
            )));
        }
        let mut id = String::new();
        let mut outcome = false;
        let mut features = TemporalFeatureVector::zeros(d);
        for (col, cell) in columns.iter().zip(record.iter()) {
            match col {
                Column::Id => id = cell.to_string(),
                Column::Outcome => outcome = parse_bit(cell, row)?,
                Column::Bit(f, p) => features.set(*f, *p, parse_bit(cell, row)?),
            }
        }
        patients.push(Patient {
            patient_id: id,
            features,
            outcome,
        });
    }

    let missing_columns = Period::ALL
        .iter()
        .flat_map(|&p| catalog.ids().map(move |f| (f, p)))
        .filter(|k| !present.contains(k))
        .map(|(f, p)| column_name(catalog.code(f), p))
        .collect();
    Ok(CohortLoad {
        cohort: Cohort::new(catalog, patients)?,
        missing_columns,
    })
}

/// One patient per line: present codes listed per period.
#[derive(Debug, Serialize, Deserialize)]
struct JsonPatient {
    patient_id: String,
    outcome: u8,
    #[serde(default)]
    history: Vec<String>,
    #[serde(default)]
    past: Vec<String>,
    #[serde(default)]
    last: Vec<String>,
}

fn load_jsonl(source: &str, catalog: Arc<FeatureCatalog>) -> Result<CohortLoad> {
    let d = catalog.len();
    let mut patients = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let jp: JsonPatient =
            serde_json::from_str(line).map_err(|e| Error::CohortFormat(format!("line {row}: {e}")))?;
        let outcome = match jp.outcome {
            0 => false,
            1 => true,
            _ => return Err(Error::NonBinary { row }),
        };
        let mut features = TemporalFeatureVector::zeros(d);
        for (period, codes) in [
            (Period::History, &jp.history),
            (Period::Past, &jp.past),
            (Period::Last, &jp.last),
        ] {
            for code in codes {
                features.set(catalog.require(code)?, period, true);
            }
        }
        patients.push(Patient {
            patient_id: jp.patient_id,
            features,
            outcome,
        });
    }
    Ok(CohortLoad {
        cohort: Cohort::new(catalog, patients)?,
        missing_columns: Vec::new(),
    })
}

/// Write the cohort as CSV with every `<code>__<period>` column, period-major.
pub fn save_cohort_csv(cohort: &Cohort) -> String {
    let cat = cohort.catalog();
    let mut out = String::from("patient_id");
    for p in Period::ALL {
        for f in cat.features() {
            out.push(',');
            out.push_str(&column_name(&f.code, p));
        }
    }
    out.push_str(",outcome\n");
    for patient in cohort.patients() {
        out.push_str(&patient.patient_id);
        for bit in patient.features.flat() {
            out.push_str(if bit { ",1" } else { ",0" });
        }
        out.push_str(if patient.outcome { ",1\n" } else { ",0\n" });
    }
    out
}

pub fn save_cohort_jsonl(cohort: &Cohort) -> String {
    let cat = cohort.catalog();
    let codes = |v: &TemporalFeatureVector, p: Period| -> Vec<String> {
        cat.ids()
            .filter(|&f| v.get(f, p))
            .map(|f| cat.code(f).to_string())
            .collect()
    };
    let mut out = String::new();
    for patient in cohort.patients() {
        let jp = JsonPatient {
            patient_id: patient.patient_id.clone(),
            outcome: patient.outcome as u8,
            history: codes(&patient.features, Period::History),
            past: codes(&patient.features, Period::Past),
            last: codes(&patient.features, Period::Last),
        };
        out.push_str(&serde_json::to_string(&jp).expect("patient serializes"));
        out.push('\n');
    }
    out
}

/// Fraction of patients with the feature present in `period`.
pub fn prevalence(cohort: &Cohort, feature: FeatureId, period: Period) -> Result<f64> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let count = cohort
        .patients()
        .iter()
        .filter(|p| p.features.get(feature, period))
        .count();
    Ok(count as f64 / cohort.len() as f64)
}

/// History -> Last persistence of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistenceStats {
    /// P(x^l = 1 | x^h = 1)
    pub p_given_present: f64,
    /// P(x^l = 1 | x^h = 0)
    pub p_given_absent: f64,
    /// `p_given_present / p_given_absent`; +inf when the denominator is 0.
    pub ratio: f64,
    pub n_present: usize,
    pub n_absent: usize,
}

pub fn persistence_stats(cohort: &Cohort, feature: FeatureId) -> Result<PersistenceStats> {
    let (mut n1, mut k1, mut n0, mut k0) = (0usize, 0usize, 0usize, 0usize);
    for p in cohort.patients() {
        let last = p.features.get(feature, Period::Last);
        if p.features.get(feature, Period::History) {
            n1 += 1;
            k1 += last as usize;
        } else {
            n0 += 1;
            k0 += last as usize;
        }
    }
    if n1 == 0 {
        return Err(Error::EmptyStratum("present".into()));
    }
    if n0 == 0 {
        return Err(Error::EmptyStratum("absent".into()));
    }
    let p1 = k1 as f64 / n1 as f64;
    let p0 = k0 as f64 / n0 as f64;
    Ok(PersistenceStats {
        p_given_present: p1,
        p_given_absent: p0,
        ratio: if k0 == 0 { f64::INFINITY } else { p1 / p0 },
        n_present: n1,
        n_absent: n0,
    })
}
