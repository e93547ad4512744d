//! Relative risks, the CKD -> AKI -> HF cascade and confounding profiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::catalog::FeatureId;
use crate::cohort::{Cohort, Patient, Period};
use crate::error::{Error, Result};

/// Which bit defines the exposed group. `exposed_when = false` swaps the
/// coding, turning the exposure into "feature absent".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exposure {
    pub feature: FeatureId,
    pub period: Period,
    pub exposed_when: bool,
}

impl Exposure {
    pub fn present(feature: FeatureId, period: Period) -> Self {
        Self {
            feature,
            period,
            exposed_when: true,
        }
    }

    pub fn absent(feature: FeatureId, period: Period) -> Self {
        Self {
            feature,
            period,
            exposed_when: false,
        }
    }

    fn matches(&self, p: &Patient) -> bool {
        p.features.get(self.feature, self.period) == self.exposed_when
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Bit(FeatureId, Period),
    /// The patient's outcome label y.
    Outcome,
}

impl Endpoint {
    fn hit(&self, p: &Patient) -> bool {
        match *self {
            Endpoint::Bit(f, t) => p.features.get(f, t),
            Endpoint::Outcome => p.outcome,
        }
    }

    fn label(&self, cohort: &Cohort) -> String {
        match *self {
            Endpoint::Bit(f, t) => format!("{}@{t}", cohort.catalog().code(f)),
            Endpoint::Outcome => "outcome".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStep {
    pub exposure: String,
    pub outcome: String,
    pub excluded: Option<String>,
    pub n_exposed: usize,
    pub k_exposed: usize,
    pub n_unexposed: usize,
    pub k_unexposed: usize,
    pub p_exposed: f64,
    pub p_unexposed: f64,
    pub relative_risk: f64,
}

/// Risk of `outcome` in the exposed vs unexposed group, after dropping
/// patients with the `exclude` bit set.
pub fn relative_risk(
    cohort: &Cohort,
    exposure: Exposure,
    outcome: Endpoint,
    exclude: Option<(FeatureId, Period)>,
) -> Result<CascadeStep> {
    let (mut n1, mut k1, mut n0, mut k0) = (0usize, 0usize, 0usize, 0usize);
    for p in cohort.patients() {
        if let Some((f, t)) = exclude {
            if p.features.get(f, t) {
                continue;
            }
        }
        let hit = outcome.hit(p) as usize;
        if exposure.matches(p) {
            n1 += 1;
            k1 += hit;
        } else {
            n0 += 1;
            k0 += hit;
        }
    }
    if n1 == 0 {
        return Err(Error::EmptyStratum("exposed".into()));
    }
    if n0 == 0 {
        return Err(Error::EmptyStratum("unexposed".into()));
    }
    if k0 == 0 {
        return Err(Error::ZeroCell("no outcomes among unexposed".into()));
    }
    let cat = cohort.catalog();
    let p1 = k1 as f64 / n1 as f64;
    let p0 = k0 as f64 / n0 as f64;
    let coding = if exposure.exposed_when { "" } else { "!" };
    Ok(CascadeStep {
        exposure: format!("{coding}{}@{}", cat.code(exposure.feature), exposure.period),
        outcome: outcome.label(cohort),
        excluded: exclude.map(|(f, t)| format!("{}@{t}", cat.code(f))),
        n_exposed: n1,
        k_exposed: k1,
        n_unexposed: n0,
        k_unexposed: k0,
        p_exposed: p1,
        p_unexposed: p0,
        relative_risk: p1 / p0,
    })
}

/// Feature codes playing the cascade roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeRoles {
    pub ckd: String,
    pub aki: String,
}

impl Default for CascadeRoles {
    fn default() -> Self {
        Self {
            ckd: "N18".into(),
            aki: "N17".into(),
        }
    }
}

/// CKD_h -> AKI_l among patients without prior AKI, then AKI_l -> outcome.
pub fn cascade_report(cohort: &Cohort, roles: &CascadeRoles) -> Result<Vec<CascadeStep>> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let cat = cohort.catalog();
    let ckd = cat.require(&roles.ckd)?;
    let aki = cat.require(&roles.aki)?;
    let step1 = relative_risk(
        cohort,
        Exposure::present(ckd, Period::History),
        Endpoint::Bit(aki, Period::Last),
        Some((aki, Period::History)),
    )?;
    let step2 = relative_risk(cohort, Exposure::present(aki, Period::Last), Endpoint::Outcome, None)?;
    Ok(vec![step1, step2])
}

pub fn render_steps(steps: &[CascadeStep]) -> String {
    let mut out = format!(
        "{:<16} {:<12} {:<12} {:>8} {:>8} {:>8} {:>8} {:>7}\n",
        "exposure", "outcome", "excluding", "n_exp", "p_exp", "n_unexp", "p_unexp", "RR"
    );
    for s in steps {
        let _ = writeln!(
            out,
            "{:<16} {:<12} {:<12} {:>8} {:>8.3} {:>8} {:>8.3} {:>7.2}",
            s.exposure,
            s.outcome,
            s.excluded.as_deref().unwrap_or("-"),
            s.n_exposed,
            s.p_exposed,
            s.n_unexposed,
            s.p_unexposed,
            s.relative_risk
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingRow {
    pub stratifier: String,
    pub treated: f64,
    pub untreated: f64,
    /// treated / untreated; None when the untreated prevalence is 0.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingProfile {
    pub treatment: String,
    pub population: Option<String>,
    pub n_treated: usize,
    pub n_untreated: usize,
    pub rows: Vec<ConfoundingRow>,
}

/// Prevalence of each stratifier among treated vs untreated patients,
/// optionally restricted to patients with the `population` bit set.
pub fn confounding_profile(
    cohort: &Cohort,
    treatment: (FeatureId, Period),
    stratifiers: &[(FeatureId, Period)],
    population: Option<(FeatureId, Period)>,
) -> Result<ConfoundingProfile> {
    let in_pop = |p: &&Patient| population.is_none_or(|(f, t)| p.features.get(f, t));
    let (treated, untreated): (Vec<&Patient>, Vec<&Patient>) = cohort
        .patients()
        .iter()
        .filter(in_pop)
        .partition(|p| p.features.get(treatment.0, treatment.1));
    if treated.is_empty() {
        return Err(Error::EmptyStratum("treated".into()));
    }
    if untreated.is_empty() {
        return Err(Error::EmptyStratum("untreated".into()));
    }
    let rate = |group: &[&Patient], (f, t): (FeatureId, Period)| {
        group.iter().filter(|p| p.features.get(f, t)).count() as f64 / group.len() as f64
    };
    let cat = cohort.catalog();
    let rows = stratifiers
        .iter()
        .map(|&s| {
            let a = rate(&treated, s);
            let b = rate(&untreated, s);
            ConfoundingRow {
                stratifier: format!("{}@{}", cat.code(s.0), s.1),
                treated: a,
                untreated: b,
                ratio: (b > 0.0).then(|| a / b),
            }
        })
        .collect();
    Ok(ConfoundingProfile {
        treatment: format!("{}@{}", cat.code(treatment.0), treatment.1),
        population: population.map(|(f, t)| format!("{}@{t}", cat.code(f))),
        n_treated: treated.len(),
        n_untreated: untreated.len(),
        rows,
    })
}

pub fn render_profile(profile: &ConfoundingProfile) -> String {
    let mut out = format!(
        "treatment {} (n={} treated, {} untreated){}\n{:<20} {:>8} {:>10} {:>6}\n",
        profile.treatment,
        profile.n_treated,
        profile.n_untreated,
        profile
            .population
            .as_deref()
            .map(|p| format!(" among {p}"))
            .unwrap_or_default(),
        "stratifier",
        "treated",
        "untreated",
        "ratio"
    );
    for r in &profile.rows {
        let ratio = r.ratio.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(
            out,
            "{:<20} {:>8.3} {:>10.3} {:>6}",
            r.stratifier, r.treated, r.untreated, ratio
        );
    }
    out
}
