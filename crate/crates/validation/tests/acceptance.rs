//! Acceptance run. Prints one PASS/FAIL line per primary criterion and exits
//! non-zero when any criterion fails.
//!
//! Every number is measured on freshly generated data with fixed seeds;
//! nothing is read from disk.

use std::sync::Arc;
use std::time::Instant;

use seqcf_core::cascade::{cascade_report, confounding_profile, relative_risk, CascadeRoles, Endpoint, Exposure};
use seqcf_core::cohort::{persistence_stats, prevalence, save_cohort_csv};
use seqcf_core::depgraph::{estimate_graph, GraphParams};
use seqcf_core::naivecf::{search_flips, NaiveCfConfig, SearchMode};
use seqcf_core::plausibility::{audit_naive, check_p1};
use seqcf_core::riskmodel::{auroc, finite_difference_gradient_check, train, train_test_split, TrainConfig};
use seqcf_core::rng::CounterRng;
use seqcf_core::seqcf::{
    propagate, propagate_deterministic, propagate_sample, Action, Intervention, PropagationConfig, PropagationMode,
};
use seqcf_core::synth::{generate, SynthConfig};
use seqcf_core::{
    Cohort, FeatureCatalog, FeatureId, Patient, Period, Result, RiskModel, TaxonomyClass, TemporalFeatureVector,
};
use seqcf_validation::{Check, Criterion};

/// Held-out AUROC bar, frozen after measuring 40 split seeds on the default
/// cohort (range 0.742 to 0.863).
const AUROC_THRESHOLD: f64 = 0.72;
const SPLIT_SEED: u64 = 42;

fn catalog() -> Arc<FeatureCatalog> {
    Arc::new(FeatureCatalog::default_catalog())
}

fn default_cohort() -> Cohort {
    generate(&SynthConfig::default(), catalog()).expect("default synthesis")
}

fn id(c: &Cohort, code: &str) -> FeatureId {
    c.catalog().id(code).expect("default catalog code")
}

fn calibration() -> Result<Vec<Check>> {
    let start = Instant::now();
    let cohort = default_cohort();
    let mut checks = Vec::new();
    for (code, target) in [
        ("I10", 0.790),
        ("E11", 0.455),
        ("N18", 0.335),
        ("N17", 0.257),
        ("I50", 0.419),
        ("Glucose_H", 0.639),
        ("Creatinine_H", 0.328),
    ] {
        let p = prevalence(&cohort, id(&cohort, code), Period::History)?;
        checks.push(Check::near(format!("{code}_h"), p, target, 0.02));
    }
    checks.push(Check::at_most("seconds", start.elapsed().as_secs_f64(), 10.0));
    Ok(checks)
}

fn persistence() -> Result<Vec<Check>> {
    let cohort = default_cohort();
    let mut checks = Vec::new();
    for (code, target) in [("E11", 13.5), ("I10", 5.7), ("N18", 12.6)] {
        let s = persistence_stats(&cohort, id(&cohort, code))?;
        checks.push(Check::relative(format!("{code}_ratio"), s.ratio, target, 0.10));
    }
    Ok(checks)
}

fn audit() -> Result<Vec<Check>> {
    let cohort = default_cohort();
    let report = audit_naive(&cohort)?;
    let rate = |cell: Option<&seqcf_core::plausibility::RateCell>| cell.and_then(|c| c.rate).unwrap_or(f64::NAN);
    let mut checks = Vec::new();
    for (code, target) in [("I10", 0.956), ("E11", 0.960), ("N18", 0.876)] {
        checks.push(Check::near(format!("P1_{code}"), rate(report.p1(code)), target, 0.03));
    }
    for (code, target) in [("Glucose_H", 0.607), ("N17", 0.668)] {
        checks.push(Check::near(format!("P2_{code}"), rate(report.p2(code)), target, 0.05));
    }
    checks.push(Check::near("any", rate(Some(&report.patient_level.any)), 0.573, 0.04));
    Ok(checks)
}

fn cascade() -> Result<Vec<Check>> {
    let cohort = default_cohort();
    let steps = cascade_report(&cohort, &CascadeRoles::default())?;
    let (ckd_aki, aki_hf) = (&steps[0], &steps[1]);
    Ok(vec![
        Check::within("RR_ckd_aki", ckd_aki.relative_risk, 2.0, 2.6),
        Check::within("RR_aki_hf", aki_hf.relative_risk, 1.05, 1.35),
        Check::near("p_aki|ckd", ckd_aki.p_exposed, 0.068, 0.015),
        Check::near("p_aki|no_ckd", ckd_aki.p_unexposed, 0.030, 0.015),
        Check::near("p_hf|aki", aki_hf.p_exposed, 0.164, 0.015),
        Check::near("p_hf|no_aki", aki_hf.p_unexposed, 0.138, 0.015),
    ])
}

fn confounding() -> Result<Vec<Check>> {
    let cohort = default_cohort();
    let profile = confounding_profile(
        &cohort,
        (id(&cohort, "Insulin"), Period::History),
        &[
            (id(&cohort, "N18"), Period::History),
            (id(&cohort, "Glucose_H"), Period::Last),
        ],
        Some((id(&cohort, "E11"), Period::History)),
    )?;
    let (ckd, glucose) = (&profile.rows[0], &profile.rows[1]);
    Ok(vec![
        Check::near("ckd|insulin", ckd.treated, 0.516, 0.04),
        Check::near("ckd|no_insulin", ckd.untreated, 0.229, 0.04),
        Check::near("glucose|insulin", glucose.treated, 0.193, 0.03),
        Check::near("glucose|no_insulin", glucose.untreated, 0.139, 0.03),
    ])
}

/// Every patient x every Intervention feature x every period x add/remove.
fn immutability_sweep() -> Result<Vec<Check>> {
    let cohort = default_cohort();
    let cat = cohort.catalog();
    let graph = estimate_graph(&cohort, &GraphParams::default())?;
    let model: RiskModel = train(&cohort, &TrainConfig::default())?;
    let singles: Vec<Intervention> = cat
        .of_class(TaxonomyClass::Intervention)
        .flat_map(|f| {
            Period::ALL.into_iter().flat_map(move |t| {
                [Action::Add, Action::Remove].map(|action| Intervention {
                    feature: f,
                    period: t,
                    action,
                })
            })
        })
        .collect();
    let stochastic = PropagationConfig {
        mode: PropagationMode::Stochastic,
        n_samples: 8,
        ..PropagationConfig::default()
    };
    let rng = CounterRng::new(stochastic.seed);
    let (mut total, mut failed) = (0usize, 0usize);
    for p in cohort.patients() {
        for iv in &singles {
            let det = propagate_deterministic(cat, &graph, &p.features, &[*iv])?;
            // Each Monte Carlo draw must itself be plausible, not just the majority.
            let draw = propagate_sample(cat, &graph, &p.features, &[*iv], &rng, 0)?;
            let maj = propagate(&model, cat, &graph, &p.features, &[*iv], &stochastic)?.counterfactual;
            for cf in [det, draw, maj] {
                total += 1;
                failed += !check_p1(cat, &p.features, &cf)?.is_empty() as usize;
            }
        }
    }
    Ok(vec![
        Check::at_least("propagations", total as f64, 1.0),
        Check::near("p1_pass_rate", 1.0 - failed as f64 / total as f64, 1.0, 0.0),
    ])
}

fn dense_score(w: &[f64], tau: &TemporalFeatureVector) -> f64 {
    let z: f64 = tau.flat().zip(w).map(|(b, x)| if b { *x } else { 0.0 }).sum::<f64>() + w[w.len() - 1];
    1.0 / (1.0 + (-z).exp())
}

/// Smallest flip set by scanning all 2^(3d) states; ties by lexicographic order.
fn brute_force(w: &[f64], tau: &TemporalFeatureVector, theta: f64, max: usize) -> Option<Vec<usize>> {
    let bits = 3 * tau.dim();
    let base: Vec<bool> = tau.flat().collect();
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..1 << bits {
        let flips: Vec<usize> = (0..bits).filter(|k| mask >> k & 1 == 1).collect();
        if flips.len() > max {
            continue;
        }
        let v: Vec<bool> = base
            .iter()
            .enumerate()
            .map(|(k, &b)| b ^ (mask >> k & 1 == 1))
            .collect();
        if dense_score(w, &TemporalFeatureVector::from_flat(&v).unwrap()) >= theta {
            continue;
        }
        if best.as_ref().is_none_or(|b| (flips.len(), &flips) < (b.len(), b)) {
            best = Some(flips);
        }
    }
    best
}

fn micro_cohort(rows: &[([u8; 3], [u8; 3], bool)]) -> Cohort {
    let cat = Arc::new(
        FeatureCatalog::from_json(
            r#"{"features": [{"code": "N18", "class": "immutable"}, {"code": "N17", "class": "controllable"}]}"#,
        )
        .unwrap(),
    );
    let patients = rows
        .iter()
        .enumerate()
        .map(|(i, (a, b, y))| Patient {
            patient_id: format!("M{i}"),
            features: TemporalFeatureVector::from_periods(
                vec![a[0] == 1, b[0] == 1],
                vec![a[1] == 1, b[1] == 1],
                vec![a[2] == 1, b[2] == 1],
            )
            .unwrap(),
            outcome: *y,
        })
        .collect();
    Cohort::new(cat, patients).unwrap()
}

fn oracle_equivalence() -> Result<Vec<Check>> {
    let (mut instances, mut agree) = (0usize, 0usize);
    for case in 0..60u64 {
        let rng = CounterRng::new(5000 + case);
        let d = 2 + (case % 3) as usize;
        let w: Vec<f64> = (0..=3 * d).map(|k| 4.0 * rng.uniform(0, k as u64) - 1.5).collect();
        let bits: Vec<bool> = (0..3 * d).map(|k| rng.uniform(1, k as u64) < 0.6).collect();
        let tau = TemporalFeatureVector::from_flat(&bits).unwrap();
        let theta = 0.2 + 0.6 * rng.uniform(2, 0);
        if dense_score(&w, &tau) < theta {
            continue;
        }
        let max = 1 + (case % 6) as usize;
        let cfg = NaiveCfConfig {
            theta,
            max_changes: max,
            search: SearchMode::Exhaustive,
            ..NaiveCfConfig::default()
        };
        let got = search_flips(&RiskModel::from_weights(w.clone(), d)?, &tau, &cfg)?.ok();
        instances += 1;
        agree += (got == brute_force(&w, &tau, theta, max)) as usize;
    }

    // Hand tables. Step: N18_h -> N17_l excluding prior N17_h.
    // Exposed 2/4, unexposed 1/4 -> RR 2; the last row is excluded.
    let c = micro_cohort(&[
        ([1, 1, 1], [0, 0, 1], true),
        ([1, 1, 1], [0, 0, 1], false),
        ([1, 1, 0], [0, 0, 0], false),
        ([1, 0, 1], [0, 0, 0], true),
        ([0, 0, 0], [0, 0, 1], true),
        ([0, 0, 0], [0, 0, 0], false),
        ([0, 0, 1], [0, 0, 0], false),
        ([0, 0, 0], [0, 1, 0], false),
        ([1, 1, 1], [1, 1, 1], true),
    ]);
    let step = relative_risk(
        &c,
        Exposure::present(FeatureId(0), Period::History),
        Endpoint::Bit(FeatureId(1), Period::Last),
        Some((FeatureId(1), Period::History)),
    )?;
    let rr_exact = (step.n_exposed, step.k_exposed, step.n_unexposed, step.k_unexposed) == (4, 2, 4, 1)
        && step.relative_risk == 2.0;
    // N18 persistence: present at h in 5 rows, 4 keep it at l; absent in 4, 1 gains it.
    let s = persistence_stats(&c, FeatureId(0))?;
    let pers_exact = (s.n_present, s.n_absent) == (5, 4) && s.p_given_present == 0.8 && s.p_given_absent == 0.25;

    Ok(vec![
        Check::at_least("toy_instances", instances as f64, 20.0),
        Check::near("toy_agreement", agree as f64 / instances.max(1) as f64, 1.0, 0.0),
        Check::near("rr_table_exact", rr_exact as u8 as f64, 1.0, 0.0),
        Check::near("persistence_table_exact", pers_exact as u8 as f64, 1.0, 0.0),
    ])
}

fn numerics() -> Result<Vec<Check>> {
    // Gradient check on a fixed ten-patient toy.
    let cat = Arc::new(FeatureCatalog::from_json(
        r#"{"features": [{"code": "A", "class": "immutable"}, {"code": "B", "class": "controllable"},
                         {"code": "C", "class": "intervention"}]}"#,
    )?);
    let rng = CounterRng::new(17);
    let toy = Cohort::new(
        cat,
        (0..10)
            .map(|i| Patient {
                patient_id: format!("G{i}"),
                features: TemporalFeatureVector::from_flat(
                    &(0..9).map(|k| rng.uniform(i, k) < 0.5).collect::<Vec<_>>(),
                )
                .unwrap(),
                outcome: i % 3 == 0,
            })
            .collect(),
    )?;
    let w: Vec<f64> = (0..10).map(|k| 2.0 * rng.uniform(99, k) - 1.0).collect();
    let fd = finite_difference_gradient_check(&toy, &w, 1.0, 1e-5);

    // Held-out AUROC.
    let cohort = default_cohort();
    let (train_set, test_set) = train_test_split(&cohort, SPLIT_SEED);
    let model: RiskModel = train(&train_set, &TrainConfig::default())?;
    let auc = auroc(&model, &test_set)?;

    // Reruns under fixed seeds.
    let synth_same = save_cohort_csv(&default_cohort()) == save_cohort_csv(&cohort);
    let again: RiskModel = train(&train_set, &TrainConfig::default())?;
    let train_same = again.to_json() == model.to_json();
    let graph = estimate_graph(&cohort, &GraphParams::default())?;
    let cfg = PropagationConfig {
        mode: PropagationMode::Stochastic,
        n_samples: 200,
        seed: 7,
        ..PropagationConfig::default()
    };
    let iv = [Intervention::new(
        cohort.catalog(),
        "Insulin",
        Period::History,
        Action::Add,
    )?];
    let p = &cohort.patients()[0].features;
    let run = || propagate(&model, cohort.catalog(), &graph, p, &iv, &cfg).map(|r| serde_json_string(&r));
    let prop_same = run()? == run()?;
    let identical = (synth_same && train_same && prop_same) as u8 as f64;

    Ok(vec![
        Check::at_most("fd_max_dev", fd, 1e-6),
        Check::at_least("auroc_heldout", auc, AUROC_THRESHOLD),
        Check::near("reruns_identical", identical, 1.0, 0.0),
    ])
}

fn serde_json_string(r: &seqcf_core::counterfactual::CounterfactualResult) -> String {
    seqcf_core::engine::to_json(r)
}

/// Lisinopril multiplies AKI risk by 0.6 in the generator; propagation
/// through the learned tables should recover that factor.
fn propagation_fidelity() -> Result<Vec<Check>> {
    let mut cfg = SynthConfig {
        n_patients: 100_000,
        ..SynthConfig::default()
    };
    cfg.cascade.lisinopril_aki_factor = 0.6;
    let cohort = generate(&cfg, catalog())?;
    let cat = cohort.catalog();
    let graph = estimate_graph(&cohort, &GraphParams::default())?;
    let (ckd, aki, acei) = (id(&cohort, "N18"), id(&cohort, "N17"), id(&cohort, "Lisinopril"));
    let patient = cohort
        .patients()
        .iter()
        .find(|p| {
            let h = |f| p.features.get(f, Period::History);
            h(ckd) && !h(aki) && !h(acei)
        })
        .expect("a CKD patient without prior AKI or ACE inhibitor");
    let treat = [Intervention::new(cat, "Lisinopril", Period::History, Action::Add)?];
    let rng = CounterRng::new(2024);
    let n = 10_000u64;
    let (mut base, mut treated) = (0usize, 0usize);
    for k in 0..n {
        base += propagate_sample(cat, &graph, &patient.features, &[], &rng, k)?.get(aki, Period::Last) as usize;
        treated += propagate_sample(cat, &graph, &patient.features, &treat, &rng, k)?.get(aki, Period::Last) as usize;
    }
    let ratio = treated as f64 / base.max(1) as f64;
    Ok(vec![
        Check::at_least("aki_samples_base", base as f64, 1.0),
        Check::relative("aki_rate_ratio", ratio, 0.6, 0.05),
    ])
}

type Measure = fn() -> Result<Vec<Check>>;

fn main() {
    let criteria: [(&'static str, Measure); 9] = [
        ("calibration", calibration),
        ("persistence", persistence),
        ("violation_audit", audit),
        ("cascade", cascade),
        ("confounding", confounding),
        ("immutability_invariant", immutability_sweep),
        ("oracle_equivalence", oracle_equivalence),
        ("numerics", numerics),
        ("propagation_fidelity", propagation_fidelity),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let c = match run() {
            Ok(checks) => Criterion::new(name, checks),
            Err(e) => Criterion::errored(name, e),
        };
        failed += !c.pass() as usize;
        println!("{c}");
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
