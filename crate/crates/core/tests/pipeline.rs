//! End to end over the default synthetic cohort: generate, estimate, train,
//! explain.

use std::sync::{Arc, OnceLock};

use seqcf_core::depgraph::{estimate_graph, EdgeSource, GraphParams, Vertex};
use seqcf_core::engine::{
    self, list_patients, patient_detail, run_counterfactual, Artifacts, CfMode, CfRequest, InterventionSpec,
};
use seqcf_core::naivecf::{generate_naive, NaiveCfConfig, NaiveOutcome};
use seqcf_core::plausibility::Constraint;
use seqcf_core::riskmodel::{train, TrainConfig};
use seqcf_core::seqcf::{candidate_interventions, propagate, Action, Intervention, PropagationConfig, PropagationMode};
use seqcf_core::synth::{generate, SynthConfig};
use seqcf_core::{Error, FeatureCatalog, Period, RiskModel, RiskScorer};

fn artifacts() -> &'static Artifacts {
    static ART: OnceLock<Artifacts> = OnceLock::new();
    ART.get_or_init(|| {
        let catalog = Arc::new(FeatureCatalog::default_catalog());
        let cohort = generate(&SynthConfig::default(), catalog).unwrap();
        let graph = estimate_graph(&cohort, &GraphParams::default()).unwrap();
        let model: RiskModel = train(&cohort, &TrainConfig::default()).unwrap();
        Artifacts::new(cohort, graph, model).unwrap()
    })
}

fn vertex(code: &str, t: Period) -> Vertex {
    Vertex::new(artifacts().catalog().id(code).unwrap(), t)
}

#[test]
fn cascade_edge_is_estimated() {
    let g = artifacts().graph();
    let e = g
        .edge(vertex("N18", Period::History), vertex("N17", Period::Last))
        .expect("CKD_h -> AKI_l");
    assert_eq!(e.source, EdgeSource::Estimated);
    assert!(e.relative_risk.unwrap() > 2.0);
    assert!(g.edges().iter().all(|e| e.src.period < e.dst.period));
}

#[test]
fn huge_gamma_leaves_only_pathways() {
    let params = GraphParams {
        gamma: 1e9,
        ..GraphParams::default()
    };
    let g = estimate_graph(artifacts().cohort(), &params).unwrap();
    assert!(!g.edges().is_empty());
    assert!(g.edges().iter().all(|e| e.source == EdgeSource::Pathway));
    // Three forward period pairs per catalog pathway.
    assert_eq!(g.edges().len(), 3 * artifacts().catalog().pathways().len());
}

#[test]
fn tiny_cohort_has_no_estimated_edges() {
    let idx: Vec<usize> = (0..20).collect();
    let small = artifacts().cohort().select(&idx);
    let g = estimate_graph(&small, &GraphParams::default()).unwrap();
    assert_eq!(g.estimated_edges().count(), 0);
}

#[test]
fn naive_counterfactuals_break_immutability() {
    let art = artifacts();
    let mut tried = 0;
    let mut p1_failures = Vec::new();
    for p in art.cohort().patients() {
        if art.model().score(&p.features) < 0.5 {
            continue;
        }
        tried += 1;
        let out = generate_naive(
            art.model(),
            art.catalog(),
            art.graph(),
            &p.features,
            &NaiveCfConfig::default(),
        )
        .unwrap();
        if let NaiveOutcome::Found(r) = out {
            if !r.plausibility.p1_ok {
                let v = r
                    .plausibility
                    .violations
                    .iter()
                    .find(|v| v.constraint == Constraint::P1)
                    .unwrap();
                assert_eq!(art.catalog().class(v.feature), seqcf_core::TaxonomyClass::Immutable);
                p1_failures.push(p.patient_id.clone());
            }
        }
    }
    assert!(tried > 0);
    assert!(
        !p1_failures.is_empty(),
        "no naive CF among {tried} high-risk patients touched a chronic code"
    );
}

#[test]
fn diabetes_survives_every_intervention() {
    let art = artifacts();
    let e11 = art.catalog().id("E11").unwrap();
    let patients: Vec<_> = art
        .cohort()
        .patients()
        .iter()
        .filter(|p| p.features.get(e11, Period::History))
        .take(40)
        .collect();
    assert!(!patients.is_empty());
    for mode in [PropagationMode::Deterministic, PropagationMode::Stochastic] {
        let cfg = PropagationConfig {
            mode,
            n_samples: 20,
            ..PropagationConfig::default()
        };
        for p in &patients {
            for iv in candidate_interventions(art.catalog(), &p.features) {
                let r = propagate(art.model(), art.catalog(), art.graph(), &p.features, &[iv], &cfg).unwrap();
                for t in [Period::Past, Period::Last] {
                    let expected = match mode {
                        // Sampling mode enforces forward persistence of the chronic code.
                        PropagationMode::Stochastic => true,
                        // Minimal-change mode never clears it but keeps coding gaps.
                        PropagationMode::Deterministic => p.features.get(e11, t),
                    };
                    assert!(!expected || r.counterfactual.get(e11, t));
                }
                assert!(r.plausibility.p1_ok);
            }
        }
    }
}

#[test]
fn engine_identity_request() {
    let art = artifacts();
    let id = art.cohort().patients()[0].patient_id.clone();
    let req = CfRequest {
        patient_id: id,
        mode: CfMode::Sequential,
        interventions: vec![],
        theta: None,
        samples: None,
        seed: None,
        propagation: None,
        max_changes: None,
    };
    let r = run_counterfactual(art, &req).unwrap();
    assert_eq!(r.counterfactual, r.factual);
    assert_eq!(r.metrics.predictive_shift, 0.0);
    assert!(r.stochastic.is_none());
    assert_eq!(
        engine::to_json(&r),
        engine::to_json(&run_counterfactual(art, &req).unwrap())
    );
}

#[test]
fn engine_request_errors() {
    let art = artifacts();
    let id = art.cohort().patients()[0].patient_id.clone();
    let base: CfRequest = serde_json::from_str(&format!(r#"{{"patient_id": "{id}"}}"#)).unwrap();

    let unknown = CfRequest {
        patient_id: "nobody".into(),
        ..base.clone()
    };
    assert!(matches!(
        run_counterfactual(art, &unknown),
        Err(Error::UnknownPatient(_))
    ));

    let chronic = CfRequest {
        interventions: vec![InterventionSpec {
            code: "E11".into(),
            period: Period::History,
            action: Action::Remove,
        }],
        ..base.clone()
    };
    assert!(matches!(
        run_counterfactual(art, &chronic),
        Err(Error::NotIntervention(_))
    ));

    // A tiny threshold with a one-change budget is out of reach.
    let high = art
        .cohort()
        .patients()
        .iter()
        .max_by(|a, b| {
            art.model()
                .score(&a.features)
                .total_cmp(&art.model().score(&b.features))
        })
        .unwrap();
    let naive = CfRequest {
        patient_id: high.patient_id.clone(),
        mode: CfMode::Naive,
        theta: Some(0.001),
        max_changes: Some(1),
        ..base.clone()
    };
    assert!(matches!(
        run_counterfactual(art, &naive),
        Err(Error::NoCounterfactual { .. })
    ));

    let stochastic: CfRequest =
        serde_json::from_str(&format!(r#"{{"patient_id": "{id}", "samples": 10, "seed": 3}}"#)).unwrap();
    let r = run_counterfactual(art, &stochastic).unwrap();
    assert_eq!(r.stochastic.unwrap().n_samples, 10);

    assert!(serde_json::from_str::<CfRequest>(r#"{"patient_id": "x", "bogus": 1}"#).is_err());
}

#[test]
fn patient_listing_and_detail() {
    let art = artifacts();
    let page = list_patients(art, 10, 5, None).unwrap();
    assert_eq!(page.total, art.cohort().len());
    assert_eq!(page.rows.len(), 10);
    assert_eq!(page.rows[0].patient_id, art.cohort().patients()[5].patient_id);
    let risky = list_patients(art, usize::MAX, 0, Some(0.5)).unwrap();
    assert!(risky.rows.iter().all(|r| r.y_hat >= 0.5));
    assert!(list_patients(art, 1, 0, Some(1.5)).is_err());

    let p = &art.cohort().patients()[3];
    let detail = patient_detail(art, &p.patient_id).unwrap();
    for (t, block) in [
        (Period::History, &detail.history),
        (Period::Past, &detail.past),
        (Period::Last, &detail.last),
    ] {
        assert_eq!(block.len(), art.catalog().len());
        for (f, bit) in art.catalog().features().iter().zip(block) {
            assert_eq!(bit.value, p.features.get(f.id, t));
            assert_eq!(bit.class, f.class);
        }
    }
}

#[test]
fn artifacts_round_trip_through_a_directory() {
    let art = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: String| std::fs::write(dir.path().join(name), text).unwrap();
    write(engine::CATALOG_FILE, art.catalog().to_json());
    write(engine::COHORT_FILE, seqcf_core::cohort::save_cohort_csv(art.cohort()));
    write(engine::GRAPH_FILE, art.graph().to_json());
    write(engine::MODEL_FILE, art.model().to_json());
    let back = Artifacts::load_dir(dir.path()).unwrap();
    assert_eq!(back.cohort().patients(), art.cohort().patients());
    assert_eq!(back.model(), art.model());
    let id = &art.cohort().patients()[7].patient_id;
    let req: CfRequest = serde_json::from_str(&format!(
        r#"{{"patient_id": "{id}", "interventions": [{{"code": "Insulin", "period": "history"}}]}}"#
    ))
    .unwrap();
    assert_eq!(
        engine::to_json(&run_counterfactual(&back, &req).unwrap()),
        engine::to_json(&run_counterfactual(art, &req).unwrap())
    );

    // A model trained on another catalog is rejected.
    write(engine::MODEL_FILE, RiskModel::zeros(3).to_json());
    assert!(matches!(
        Artifacts::load_dir(dir.path()),
        Err(Error::ArtifactMismatch(_))
    ));
}

#[test]
fn intervention_parsing_via_catalog() {
    let cat = artifacts().catalog();
    let iv = Intervention::parse(cat, "Lisinopril@history").unwrap();
    assert_eq!(iv.feature, cat.id("Lisinopril").unwrap());
}
