//! Synthetic cohorts calibrated to the published cohort statistics.
//!
//! Sampling is ancestral: History comorbidities (with insulin confounding by
//! indication), Past and Last bits from persistence parameters, AKI at Last
//! from the CKD cascade, and the outcome from AKI at Last. Every draw comes
//! from a counter-based stream keyed by (seed, period, feature, patient), so
//! the bits a patient receives never depend on generation order.
//!
//! Two sampling modes are offered. `Exact` assigns `round(rate * n)` positives
//! inside every stratum, choosing patients by their smallest random keys
//! (weighted steps use Efraimidis-Spirakis keys). `Bernoulli` draws each
//! patient independently. Exact counts remove sampling noise from the ratio
//! statistics, which at n = 2723 is otherwise comparable to the calibration
//! tolerance.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cascade::{confounding_profile, relative_risk, Endpoint, Exposure};
use crate::catalog::{FeatureCatalog, FeatureId, TaxonomyClass};
use crate::cohort::{persistence_stats, prevalence, Cohort, Patient, Period, TemporalFeatureVector};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Exact,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Persistence {
    pub p_given_present: f64,
    pub p_given_absent: f64,
}

const fn pers(p_given_present: f64, p_given_absent: f64) -> Persistence {
    Persistence {
        p_given_present,
        p_given_absent,
    }
}

/// Catalog codes that play a part in the generative story. A role whose code
/// is missing from the catalog switches its mechanism off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRoles {
    pub diabetes: String,
    pub ckd: String,
    pub aki: String,
    pub heart_failure: String,
    pub hypertension: String,
    pub insulin: String,
    pub ace_inhibitor: String,
    pub glucose: String,
}

impl Default for SynthRoles {
    fn default() -> Self {
        Self {
            diabetes: "E11".into(),
            ckd: "N18".into(),
            aki: "N17".into(),
            heart_failure: "I50".into(),
            hypertension: "I10".into(),
            insulin: "Insulin".into(),
            ace_inhibitor: "Lisinopril".into(),
            glucose: "Glucose_H".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeParams {
    pub rr_ckd_to_aki: f64,
    pub rr_aki_to_hf: f64,
    pub p_aki_given_no_ckd: f64,
    pub p_hf_given_no_aki: f64,
    /// AKI at Last among patients with AKI already in History.
    pub p_aki_given_prior_aki: f64,
    /// How much likelier prior AKI is given CKD in History.
    pub rr_ckd_prior_aki: f64,
    /// Multiplier on AKI-at-Last risk for ACE-inhibitor use in History.
    pub lisinopril_aki_factor: f64,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            rr_ckd_to_aki: 2.27,
            rr_aki_to_hf: 1.19,
            p_aki_given_no_ckd: 0.030,
            p_hf_given_no_aki: 0.138,
            p_aki_given_prior_aki: 0.223,
            rr_ckd_prior_aki: 5.0,
            lisinopril_aki_factor: 1.0,
        }
    }
}

/// Prevalence among insulin-treated vs untreated diabetics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub treated: f64,
    pub untreated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfoundingParams {
    pub p_insulin_given_diabetes: f64,
    pub p_insulin_without_diabetes: f64,
    pub ckd: GroupRates,
    pub prior_aki: GroupRates,
    pub prior_hf: GroupRates,
}

impl Default for ConfoundingParams {
    fn default() -> Self {
        Self {
            p_insulin_given_diabetes: 605.0 / 1239.0,
            p_insulin_without_diabetes: 0.0,
            ckd: GroupRates {
                treated: 0.516,
                untreated: 0.229,
            },
            prior_aki: GroupRates {
                treated: 0.401,
                untreated: 0.145,
            },
            prior_hf: GroupRates {
                treated: 0.618,
                untreated: 0.357,
            },
        }
    }
}

/// Elevated glucose at Last by treatment group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlucoseLast {
    pub treated: f64,
    pub untreated: f64,
    pub non_diabetic: f64,
}

impl Default for GlucoseLast {
    fn default() -> Self {
        Self {
            treated: 0.193,
            untreated: 0.139,
            non_diabetic: 0.062,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Clustering {
    /// P(hypertension | diabetes or CKD in History).
    pub p_hypertension_given_cardiometabolic: f64,
}

impl Default for Clustering {
    fn default() -> Self {
        Self {
            p_hypertension_given_cardiometabolic: 0.92,
        }
    }
}

/// Relative selection weight for the outcome within each AKI stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeWeight {
    pub code: String,
    pub period: Period,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerance {
    pub prevalence_abs: f64,
    pub ratio_rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            prevalence_abs: 0.02,
            ratio_rel: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Calibration target only; the outcome follows the cascade rates.
    pub case_fraction: f64,
    pub seed: u64,
    pub sampling: Sampling,
    pub roles: SynthRoles,
    pub history_prevalence: BTreeMap<String, f64>,
    /// History -> Last persistence; Immutable features reuse it for Past.
    pub persistence: BTreeMap<String, Persistence>,
    /// History -> Past persistence for non-Immutable features.
    pub past_persistence: BTreeMap<String, Persistence>,
    pub default_prevalence: f64,
    pub default_persistence: Persistence,
    /// Fraction of patients with any Last-period documentation.
    pub last_coverage: f64,
    pub cascade: CascadeParams,
    pub confounding: ConfoundingParams,
    pub glucose_last: GlucoseLast,
    pub clustering: Clustering,
    pub outcome_weights: Vec<OutcomeWeight>,
    pub tolerance: Tolerance,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let history_prevalence = [
            ("I10", 0.790),
            ("E11", 0.455),
            ("N18", 0.335),
            ("N17", 0.257),
            ("I50", 0.419),
            ("Glucose_H", 0.639),
            ("Creatinine_H", 0.328),
            ("E66", 0.40),
            ("Troponin_H", 0.15),
            ("Lisinopril", 0.332),
            ("Metoprolol", 0.30),
            ("Atorvastatin", 0.45),
            ("LoopDiuretic", 0.20),
        ];
        let persistence = [
            ("E11", pers(0.673, 0.050)),
            ("I10", pers(0.520, 0.091)),
            ("N18", pers(0.379, 0.030)),
            ("I50", pers(0.10, 0.01)),
            ("E66", pers(0.10, 0.01)),
            ("Creatinine_H", pers(0.10, 0.02)),
            ("Troponin_H", pers(0.01, 0.01)),
            ("Lisinopril", pers(0.6, 0.05)),
            ("Insulin", pers(0.6, 0.05)),
            ("Metoprolol", pers(0.6, 0.05)),
            ("Atorvastatin", pers(0.6, 0.05)),
            ("LoopDiuretic", pers(0.6, 0.05)),
        ];
        let past_persistence = [
            ("Glucose_H", pers(0.5, 0.1)),
            ("Creatinine_H", pers(0.4, 0.05)),
            ("Troponin_H", pers(0.5, 0.1)),
            ("N17", pers(0.3, 0.03)),
            ("Lisinopril", pers(0.8, 0.05)),
            ("Insulin", pers(0.8, 0.05)),
            ("Metoprolol", pers(0.8, 0.05)),
            ("Atorvastatin", pers(0.8, 0.05)),
            ("LoopDiuretic", pers(0.8, 0.05)),
        ];
        Self {
            n_patients: 2723,
            case_fraction: 0.141,
            seed: 42,
            sampling: Sampling::Exact,
            roles: SynthRoles::default(),
            history_prevalence: history_prevalence
                .into_iter()
                .map(|(c, p)| (c.to_string(), p))
                .collect(),
            persistence: persistence.into_iter().map(|(c, p)| (c.to_string(), p)).collect(),
            past_persistence: past_persistence.into_iter().map(|(c, p)| (c.to_string(), p)).collect(),
            default_prevalence: 0.1,
            default_persistence: pers(0.5, 0.05),
            last_coverage: 0.70,
            cascade: CascadeParams::default(),
            confounding: ConfoundingParams::default(),
            glucose_last: GlucoseLast::default(),
            clustering: Clustering::default(),
            outcome_weights: vec![
                OutcomeWeight {
                    code: "I50".into(),
                    period: Period::History,
                    weight: 6.0,
                },
                OutcomeWeight {
                    code: "E66".into(),
                    period: Period::History,
                    weight: 4.5,
                },
                OutcomeWeight {
                    code: "Troponin_H".into(),
                    period: Period::Past,
                    weight: 6.0,
                },
            ],
            tolerance: Tolerance::default(),
        }
    }
}

fn prob(parameter: &str, value: f64) -> Result<f64> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::config(parameter, format!("probability {value} outside [0, 1]")))
    }
}

fn positive(parameter: &str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::config(parameter, format!("{value} is not a positive real")))
    }
}

impl SynthConfig {
    /// Parse a JSON config; omitted fields keep their defaults.
    pub fn from_json(source: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(source)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every directly configured probability and rate. Derived
    /// probabilities are checked during generation.
    pub fn validate(&self) -> Result<()> {
        prob("case_fraction", self.case_fraction)?;
        prob("default_prevalence", self.default_prevalence)?;
        prob("last_coverage", self.last_coverage)?;
        for (code, &p) in &self.history_prevalence {
            prob(&format!("history_prevalence.{code}"), p)?;
        }
        let check_pers = |map: &str, code: &str, p: &Persistence| -> Result<()> {
            prob(&format!("{map}.{code}.p_given_present"), p.p_given_present)?;
            prob(&format!("{map}.{code}.p_given_absent"), p.p_given_absent)?;
            Ok(())
        };
        for (code, p) in &self.persistence {
            check_pers("persistence", code, p)?;
        }
        for (code, p) in &self.past_persistence {
            check_pers("past_persistence", code, p)?;
        }
        check_pers("default_persistence", "*", &self.default_persistence)?;

        let c = &self.cascade;
        positive("cascade.rr_ckd_to_aki", c.rr_ckd_to_aki)?;
        positive("cascade.rr_aki_to_hf", c.rr_aki_to_hf)?;
        positive("cascade.rr_ckd_prior_aki", c.rr_ckd_prior_aki)?;
        if !(c.lisinopril_aki_factor.is_finite() && c.lisinopril_aki_factor >= 0.0) {
            return Err(Error::config(
                "cascade.lisinopril_aki_factor",
                "must be a non-negative real",
            ));
        }
        prob("cascade.p_aki_given_no_ckd", c.p_aki_given_no_ckd)?;
        prob("cascade.p_hf_given_no_aki", c.p_hf_given_no_aki)?;
        prob("cascade.p_aki_given_prior_aki", c.p_aki_given_prior_aki)?;
        prob("cascade.rr_ckd_to_aki", c.p_aki_given_no_ckd * c.rr_ckd_to_aki)?;
        prob("cascade.rr_aki_to_hf", c.p_hf_given_no_aki * c.rr_aki_to_hf)?;
        for p in [
            c.p_aki_given_no_ckd,
            c.p_aki_given_no_ckd * c.rr_ckd_to_aki,
            c.p_aki_given_prior_aki,
        ] {
            prob("cascade.lisinopril_aki_factor", p * c.lisinopril_aki_factor)?;
        }

        let k = &self.confounding;
        prob("confounding.p_insulin_given_diabetes", k.p_insulin_given_diabetes)?;
        prob("confounding.p_insulin_without_diabetes", k.p_insulin_without_diabetes)?;
        for (name, g) in [("ckd", &k.ckd), ("prior_aki", &k.prior_aki), ("prior_hf", &k.prior_hf)] {
            prob(&format!("confounding.{name}.treated"), g.treated)?;
            prob(&format!("confounding.{name}.untreated"), g.untreated)?;
        }
        prob("glucose_last.treated", self.glucose_last.treated)?;
        prob("glucose_last.untreated", self.glucose_last.untreated)?;
        prob("glucose_last.non_diabetic", self.glucose_last.non_diabetic)?;
        prob(
            "clustering.p_hypertension_given_cardiometabolic",
            self.clustering.p_hypertension_given_cardiometabolic,
        )?;
        for w in &self.outcome_weights {
            positive(&format!("outcome_weights.{}", w.code), w.weight)?;
        }
        positive("tolerance.prevalence_abs", self.tolerance.prevalence_abs)?;
        positive("tolerance.ratio_rel", self.tolerance.ratio_rel)?;
        Ok(())
    }

    fn history_rate(&self, code: &str) -> f64 {
        self.history_prevalence
            .get(code)
            .copied()
            .unwrap_or(self.default_prevalence)
    }

    fn last_persistence(&self, code: &str) -> Persistence {
        self.persistence.get(code).copied().unwrap_or(self.default_persistence)
    }

    fn past_persistence(&self, code: &str, class: TaxonomyClass) -> Persistence {
        let own = match class {
            TaxonomyClass::Immutable => self.persistence.get(code),
            _ => self.past_persistence.get(code),
        };
        own.copied().unwrap_or(self.default_persistence)
    }
}

const COVERAGE_STREAM: u64 = 1;
const OUTCOME_STREAM: u64 = 2;

fn stream(period: Period, feature: FeatureId) -> u64 {
    ((period.index() as u64 + 1) << 32) | feature.0 as u64
}

/// Stratified draws for one cohort.
struct Draws {
    rng: CounterRng,
    sampling: Sampling,
    notes: Vec<String>,
}

impl Draws {
    /// Mark positives per stratum. `rates[s]` is the target fraction of
    /// stratum `s`; positives are placed only on `eligible` patients.
    fn select(
        &mut self,
        label: &str,
        stream: u64,
        strata: &[usize],
        rates: &[f64],
        eligible: Option<&[bool]>,
        weights: Option<&[f64]>,
    ) -> Vec<bool> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); rates.len()];
        for (i, &s) in strata.iter().enumerate() {
            members[s].push(i);
        }
        let mut out = vec![false; strata.len()];
        for (s, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let cand: Vec<usize> = m.iter().copied().filter(|&i| eligible.is_none_or(|e| e[i])).collect();
            let target = rates[s] * m.len() as f64;
            match self.sampling {
                Sampling::Exact => self.exact(label, stream, s, &cand, target, weights, &mut out),
                Sampling::Bernoulli => self.bernoulli(label, stream, s, &cand, target, weights, &mut out),
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn exact(
        &mut self,
        label: &str,
        stream: u64,
        s: usize,
        cand: &[usize],
        target: f64,
        weights: Option<&[f64]>,
        out: &mut [bool],
    ) {
        let mut k = target.round() as usize;
        if k > cand.len() {
            self.notes.push(format!(
                "{label}: stratum {s} wants {k} positives but only {} eligible",
                cand.len()
            ));
            k = cand.len();
        }
        let mut keyed: Vec<(f64, usize)> = cand
            .iter()
            .map(|&i| {
                let w = weights.map_or(1.0, |w| w[i]);
                (self.rng.open_uniform(stream, i as u64).ln() / w, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &keyed[..k] {
            out[i] = true;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bernoulli(
        &mut self,
        label: &str,
        stream: u64,
        s: usize,
        cand: &[usize],
        target: f64,
        weights: Option<&[f64]>,
        out: &mut [bool],
    ) {
        if cand.is_empty() {
            if target > 0.0 {
                self.notes
                    .push(format!("{label}: stratum {s} has no eligible patients"));
            }
            return;
        }
        let n = cand.len() as f64;
        if target >= n {
            if target > n + 1e-9 {
                self.notes.push(format!("{label}: stratum {s} rate clamped to 1"));
            }
            cand.iter().for_each(|&i| out[i] = true);
            return;
        }
        let probs: Vec<f64> = match weights {
            None => vec![target / n; cand.len()],
            Some(w) => {
                // p_i = sigmoid(a + ln w_i) with a chosen so that sum p_i = target.
                let logw: Vec<f64> = cand.iter().map(|&i| w[i].ln()).collect();
                let total = |a: f64| logw.iter().map(|lw| crate::num::sigmoid(a + lw)).sum::<f64>();
                let (mut lo, mut hi) = (-60.0f64, 60.0f64);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if total(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let a = 0.5 * (lo + hi);
                logw.iter().map(|lw| crate::num::sigmoid(a + lw)).collect()
            }
        };
        for (&i, &p) in cand.iter().zip(&probs) {
            debug_assert!((0.0..=1.0).contains(&p));
            out[i] = self.rng.uniform(stream, i as u64) < p;
        }
    }
}

/// A generated cohort plus diagnostics about clamped strata.
#[derive(Debug, Clone)]
pub struct Generated {
    pub cohort: Cohort,
    pub notes: Vec<String>,
}

pub fn generate(config: &SynthConfig, catalog: Arc<FeatureCatalog>) -> Result<Cohort> {
    Ok(generate_detailed(config, catalog)?.cohort)
}

struct Roles {
    diabetes: Option<FeatureId>,
    ckd: Option<FeatureId>,
    aki: Option<FeatureId>,
    heart_failure: Option<FeatureId>,
    hypertension: Option<FeatureId>,
    insulin: Option<FeatureId>,
    ace_inhibitor: Option<FeatureId>,
    glucose: Option<FeatureId>,
}

pub fn generate_detailed(config: &SynthConfig, catalog: Arc<FeatureCatalog>) -> Result<Generated> {
    config.validate()?;
    let n = config.n_patients;
    let d = catalog.len();
    let r = &config.roles;
    let roles = Roles {
        diabetes: catalog.id(&r.diabetes),
        ckd: catalog.id(&r.ckd),
        aki: catalog.id(&r.aki),
        heart_failure: catalog.id(&r.heart_failure),
        hypertension: catalog.id(&r.hypertension),
        insulin: catalog.id(&r.insulin),
        ace_inhibitor: catalog.id(&r.ace_inhibitor),
        glucose: catalog.id(&r.glucose),
    };
    let mut draws = Draws {
        rng: CounterRng::new(config.seed),
        sampling: config.sampling,
        notes: Vec::new(),
    };
    let everyone = vec![0usize; n];
    let mut h: Vec<Option<Vec<bool>>> = vec![None; d];
    let code = |f: FeatureId| catalog.code(f);

    // History: diabetes and insulin define the confounding groups
    // 0 = treated diabetic, 1 = untreated diabetic, 2 = non-diabetic.
    let k = &config.confounding;
    let mut group = vec![0usize; n];
    let mut n_groups = 1;
    let mut group_split: Option<(f64, f64)> = None;
    if let (Some(dm), Some(ins)) = (roles.diabetes, roles.insulin) {
        let pd = config.history_rate(code(dm));
        let dm_bits = draws.select("diabetes", stream(Period::History, dm), &everyone, &[pd], None, None);
        let strata: Vec<usize> = dm_bits.iter().map(|&b| b as usize).collect();
        let ins_bits = draws.select(
            "insulin",
            stream(Period::History, ins),
            &strata,
            &[k.p_insulin_without_diabetes, k.p_insulin_given_diabetes],
            None,
            None,
        );
        for i in 0..n {
            group[i] = match (dm_bits[i], ins_bits[i]) {
                (true, true) => 0,
                (true, false) => 1,
                (false, _) => 2,
            };
        }
        n_groups = 3;
        group_split = Some((pd, k.p_insulin_given_diabetes));
        h[dm.0] = Some(dm_bits);
        h[ins.0] = Some(ins_bits);
    }

    // Per-group rates that keep the configured marginal.
    let split = |param: &str, rates: &GroupRates, marginal: f64| -> Result<Vec<f64>> {
        match group_split {
            None => Ok(vec![marginal]),
            Some((pd, pi)) => {
                let diabetic = pi * rates.treated + (1.0 - pi) * rates.untreated;
                let other = if pd < 1.0 {
                    (marginal - pd * diabetic) / (1.0 - pd)
                } else {
                    0.0
                };
                Ok(vec![rates.treated, rates.untreated, prob(param, other)?])
            }
        }
    };

    let mut ckd_group_rates = None;
    if let Some(ckd) = roles.ckd {
        let rates = split("confounding.ckd", &k.ckd, config.history_rate(code(ckd)))?;
        h[ckd.0] = Some(draws.select("ckd", stream(Period::History, ckd), &group, &rates, None, None));
        ckd_group_rates = Some(rates);
    }
    if let Some(aki) = roles.aki {
        let m = split("confounding.prior_aki", &k.prior_aki, config.history_rate(code(aki)))?;
        let bits = match (roles.ckd, &ckd_group_rates) {
            (Some(ckd), Some(c)) => {
                // Within each group: a = R*b for CKD, b otherwise, mean m.
                let rr = config.cascade.rr_ckd_prior_aki;
                let mut rates = Vec::with_capacity(2 * n_groups);
                for g in 0..n_groups {
                    let b = m[g] / (1.0 + c[g] * (rr - 1.0));
                    rates.push(prob("cascade.rr_ckd_prior_aki", b)?);
                    rates.push(prob("cascade.rr_ckd_prior_aki", rr * b)?);
                }
                let ckd_bits = h[ckd.0].as_ref().expect("ckd drawn");
                let strata: Vec<usize> = (0..n).map(|i| group[i] * 2 + ckd_bits[i] as usize).collect();
                draws.select("prior aki", stream(Period::History, aki), &strata, &rates, None, None)
            }
            _ => draws.select("prior aki", stream(Period::History, aki), &group, &m, None, None),
        };
        h[aki.0] = Some(bits);
    }
    if let Some(hf) = roles.heart_failure {
        let rates = split("confounding.prior_hf", &k.prior_hf, config.history_rate(code(hf)))?;
        h[hf.0] = Some(draws.select("prior hf", stream(Period::History, hf), &group, &rates, None, None));
    }
    if let Some(htn) = roles.hypertension {
        let cardio: Vec<bool> = (0..n)
            .map(|i| {
                [roles.diabetes, roles.ckd]
                    .iter()
                    .flatten()
                    .any(|f| h[f.0].as_ref().is_some_and(|b| b[i]))
            })
            .collect();
        let marginal = config.history_rate(code(htn));
        let n_cardio = cardio.iter().filter(|&&b| b).count();
        let rates = if roles.diabetes.is_some() || roles.ckd.is_some() {
            let pc = if n == 0 { 0.0 } else { n_cardio as f64 / n as f64 };
            let pin = config.clustering.p_hypertension_given_cardiometabolic;
            let other = if pc < 1.0 {
                (marginal - pc * pin) / (1.0 - pc)
            } else {
                0.0
            };
            vec![prob("clustering.p_hypertension_given_cardiometabolic", other)?, pin]
        } else {
            vec![marginal, marginal]
        };
        let strata: Vec<usize> = cardio.iter().map(|&b| b as usize).collect();
        h[htn.0] = Some(draws.select(
            "hypertension",
            stream(Period::History, htn),
            &strata,
            &rates,
            None,
            None,
        ));
    }
    let h: Vec<Vec<bool>> = catalog
        .ids()
        .map(|f| match h[f.0].take() {
            Some(bits) => bits,
            None => {
                let rate = config.history_rate(code(f));
                draws.select(code(f), stream(Period::History, f), &everyone, &[rate], None, None)
            }
        })
        .collect();

    // Past: persistence from History, no coverage gating.
    let s: Vec<Vec<bool>> = catalog
        .ids()
        .map(|f| {
            let p = config.past_persistence(code(f), catalog.class(f));
            let strata: Vec<usize> = h[f.0].iter().map(|&b| b as usize).collect();
            draws.select(
                code(f),
                stream(Period::Past, f),
                &strata,
                &[p.p_given_absent, p.p_given_present],
                None,
                None,
            )
        })
        .collect();

    // Last: only documented patients may carry Last-period codes.
    let covered = draws.select(
        "coverage",
        COVERAGE_STREAM,
        &everyone,
        &[config.last_coverage],
        None,
        None,
    );
    let c = &config.cascade;
    let mut l: Vec<Vec<bool>> = Vec::with_capacity(d);
    for f in catalog.ids() {
        let st = stream(Period::Last, f);
        let bits = if Some(f) == roles.aki {
            let ckd = roles.ckd.map(|x| &h[x.0]);
            let acei = roles.ace_inhibitor.map(|x| &h[x.0]);
            let prior = &h[f.0];
            let strata: Vec<usize> = (0..n)
                .map(|i| {
                    (prior[i] as usize) * 4
                        + ckd.is_some_and(|b| b[i]) as usize * 2
                        + acei.is_some_and(|b| b[i]) as usize
                })
                .collect();
            let mut rates = Vec::with_capacity(8);
            for idx in 0..8 {
                let base = if idx & 4 != 0 {
                    c.p_aki_given_prior_aki
                } else if idx & 2 != 0 {
                    c.p_aki_given_no_ckd * c.rr_ckd_to_aki
                } else {
                    c.p_aki_given_no_ckd
                };
                let factor = if idx & 1 != 0 { c.lisinopril_aki_factor } else { 1.0 };
                rates.push(prob("cascade.lisinopril_aki_factor", base * factor)?);
            }
            draws.select("aki", st, &strata, &rates, Some(&covered), None)
        } else if Some(f) == roles.glucose && group_split.is_some() {
            let g = &config.glucose_last;
            let rates = [g.treated, g.untreated, g.non_diabetic];
            draws.select("glucose", st, &group, &rates, Some(&covered), None)
        } else {
            let p = config.last_persistence(code(f));
            let strata: Vec<usize> = h[f.0].iter().map(|&b| b as usize).collect();
            draws.select(
                code(f),
                st,
                &strata,
                &[p.p_given_absent, p.p_given_present],
                Some(&covered),
                None,
            )
        };
        l.push(bits);
    }

    // Outcome: cascade rate by AKI at Last, extra drivers as weights.
    let aki_last: Vec<usize> = match roles.aki {
        Some(aki) => l[aki.0].iter().map(|&b| b as usize).collect(),
        None => everyone.clone(),
    };
    let mut weights = vec![1.0f64; n];
    for w in &config.outcome_weights {
        if let Some(f) = catalog.id(&w.code) {
            let bits = match w.period {
                Period::History => &h[f.0],
                Period::Past => &s[f.0],
                Period::Last => &l[f.0],
            };
            for (wi, &b) in weights.iter_mut().zip(bits) {
                if b {
                    *wi *= w.weight;
                }
            }
        }
    }
    let outcome = draws.select(
        "outcome",
        OUTCOME_STREAM,
        &aki_last,
        &[c.p_hf_given_no_aki, c.p_hf_given_no_aki * c.rr_aki_to_hf],
        None,
        Some(&weights),
    );

    let patients = (0..n)
        .map(|i| {
            let col = |m: &Vec<Vec<bool>>| m.iter().map(|bits| bits[i]).collect::<Vec<bool>>();
            Patient {
                patient_id: format!("P{:05}", i + 1),
                features: TemporalFeatureVector::from_periods(col(&h), col(&s), col(&l)).expect("equal period lengths"),
                outcome: outcome[i],
            }
        })
        .collect();
    Ok(Generated {
        cohort: Cohort::new(catalog, patients)?,
        notes: draws.notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub name: String,
    pub target: f64,
    pub observed: Option<f64>,
    pub tolerance: f64,
    /// Tolerance is relative to the target rather than absolute.
    pub relative: bool,
    pub pass: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_patients: usize,
    pub pass: bool,
    pub targets: Vec<CalibrationTarget>,
}

impl CalibrationReport {
    pub fn target(&self, name: &str) -> Option<&CalibrationTarget> {
        self.targets.iter().find(|t| t.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CalibrationTarget> {
        self.targets.iter().filter(|t| !t.pass)
    }
}

struct ReportBuilder<'a> {
    tol: &'a Tolerance,
    targets: Vec<CalibrationTarget>,
}

impl ReportBuilder<'_> {
    fn push(&mut self, name: String, target: f64, observed: Result<f64, String>, relative: bool) {
        let tolerance = if relative {
            self.tol.ratio_rel
        } else {
            self.tol.prevalence_abs
        };
        let (observed, note) = match observed {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (None, Some(format!("non-finite observation {v}"))),
            Err(e) => (None, Some(e)),
        };
        let pass = observed.is_some_and(|v| {
            let dev = (v - target).abs();
            if relative {
                dev <= tolerance * target.abs() + 1e-12
            } else {
                dev <= tolerance + 1e-12
            }
        });
        self.targets.push(CalibrationTarget {
            name,
            target,
            observed,
            tolerance,
            relative,
            pass,
            note,
        });
    }
}

/// Compare the cohort's statistics with the values the config targets,
/// measured with the cohort and cascade modules.
pub fn validate_calibration(cohort: &Cohort, config: &SynthConfig) -> CalibrationReport {
    let cat = cohort.catalog();
    let mut b = ReportBuilder {
        tol: &config.tolerance,
        targets: Vec::new(),
    };

    for (code, &rate) in &config.history_prevalence {
        if let Some(f) = cat.id(code) {
            b.push(
                format!("prevalence.{code}@history"),
                rate,
                prevalence(cohort, f, Period::History).map_err(|e| e.to_string()),
                false,
            );
        }
    }
    let case_fraction = if cohort.is_empty() {
        Err(Error::EmptyCohort.to_string())
    } else {
        Ok(cohort.cases() as f64 / cohort.len() as f64)
    };
    b.push("case_fraction".into(), config.case_fraction, case_fraction, false);

    for (code, p) in &config.persistence {
        let Some(f) = cat.id(code) else { continue };
        if cat.class(f) != TaxonomyClass::Immutable || p.p_given_absent <= 0.0 {
            continue;
        }
        let stats = persistence_stats(cohort, f);
        b.push(
            format!("persistence.{code}.ratio"),
            p.p_given_present / p.p_given_absent,
            stats.map(|s| s.ratio).map_err(|e| e.to_string()),
            true,
        );
    }

    let r = &config.roles;
    let c = &config.cascade;
    if let (Some(ckd), Some(aki)) = (cat.id(&r.ckd), cat.id(&r.aki)) {
        // Lisinopril scales AKI risk for a fraction of every stratum.
        let acei_mix = match cat.id(&r.ace_inhibitor) {
            Some(f) if !cohort.is_empty() => {
                let p = prevalence(cohort, f, Period::History).unwrap_or(0.0);
                1.0 + p * (c.lisinopril_aki_factor - 1.0)
            }
            _ => 1.0,
        };
        let step1 = relative_risk(
            cohort,
            Exposure::present(ckd, Period::History),
            Endpoint::Bit(aki, Period::Last),
            Some((aki, Period::History)),
        );
        let p_exp = c.p_aki_given_no_ckd * c.rr_ckd_to_aki * acei_mix;
        let p_unexp = c.p_aki_given_no_ckd * acei_mix;
        b.push(
            "cascade.aki_given_ckd".into(),
            p_exp,
            step1.as_ref().map(|s| s.p_exposed).map_err(|e| e.to_string()),
            false,
        );
        b.push(
            "cascade.aki_given_no_ckd".into(),
            p_unexp,
            step1.as_ref().map(|s| s.p_unexposed).map_err(|e| e.to_string()),
            false,
        );
        b.push(
            "cascade.ckd_to_aki_rr".into(),
            c.rr_ckd_to_aki,
            step1.map(|s| s.relative_risk).map_err(|e| e.to_string()),
            true,
        );

        let step2 = relative_risk(cohort, Exposure::present(aki, Period::Last), Endpoint::Outcome, None);
        b.push(
            "cascade.hf_given_aki".into(),
            c.p_hf_given_no_aki * c.rr_aki_to_hf,
            step2.as_ref().map(|s| s.p_exposed).map_err(|e| e.to_string()),
            false,
        );
        b.push(
            "cascade.hf_given_no_aki".into(),
            c.p_hf_given_no_aki,
            step2.as_ref().map(|s| s.p_unexposed).map_err(|e| e.to_string()),
            false,
        );
        b.push(
            "cascade.aki_to_hf_rr".into(),
            c.rr_aki_to_hf,
            step2.map(|s| s.relative_risk).map_err(|e| e.to_string()),
            true,
        );
    }

    if let (Some(dm), Some(ins)) = (cat.id(&r.diabetes), cat.id(&r.insulin)) {
        let k = &config.confounding;
        let mut strat = Vec::new();
        let mut expected = Vec::new();
        for (code, rates, period, name) in [
            (&r.ckd, k.ckd, Period::History, "ckd"),
            (&r.aki, k.prior_aki, Period::History, "prior_aki"),
            (&r.heart_failure, k.prior_hf, Period::History, "prior_hf"),
            (
                &r.glucose,
                GroupRates {
                    treated: config.glucose_last.treated,
                    untreated: config.glucose_last.untreated,
                },
                Period::Last,
                "glucose_last",
            ),
        ] {
            if let Some(f) = cat.id(code) {
                strat.push((f, period));
                expected.push((name, rates));
            }
        }
        let profile = confounding_profile(cohort, (ins, Period::History), &strat, Some((dm, Period::History)));
        for (i, (name, rates)) in expected.iter().enumerate() {
            let obs = |treated: bool| {
                profile
                    .as_ref()
                    .map(|p| {
                        if treated {
                            p.rows[i].treated
                        } else {
                            p.rows[i].untreated
                        }
                    })
                    .map_err(|e| e.to_string())
            };
            b.push(format!("confounding.{name}.treated"), rates.treated, obs(true), false);
            b.push(
                format!("confounding.{name}.untreated"),
                rates.untreated,
                obs(false),
                false,
            );
        }
    }

    let targets = b.targets;
    CalibrationReport {
        n_patients: cohort.len(),
        pass: targets.iter().all(|t| t.pass),
        targets,
    }
}

pub fn render_calibration(report: &CalibrationReport) -> String {
    use std::fmt::Write as _;
    let mut out = format!(
        "calibration over {} patients: {}\n",
        report.n_patients,
        if report.pass { "PASS" } else { "FAIL" }
    );
    for t in &report.targets {
        let observed = t.observed.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let tol = if t.relative {
            format!("+/-{:.0}%", t.tolerance * 100.0)
        } else {
            format!("+/-{:.3}", t.tolerance)
        };
        let _ = writeln!(
            out,
            "  {:<4} {:<34} target {:>8.4} observed {:>8} {}",
            if t.pass { "ok" } else { "FAIL" },
            t.name,
            t.target,
            observed,
            tol
        );
    }
    out
}
