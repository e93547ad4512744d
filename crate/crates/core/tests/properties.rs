//! Invariants of propagation, plausibility and the data types, over random
//! catalogs and cohorts.

mod common;

use std::sync::Arc;

use proptest::prelude::*;
use seqcf_core::cohort::{load_cohort, save_cohort_csv, CohortFormat};
use seqcf_core::counterfactual::{changes, compute_metrics};
use seqcf_core::depgraph::{estimate_graph, DependencyGraph, GraphParams, Vertex};
use seqcf_core::plausibility::{audit_naive, check_p1, check_p2, verdict};
use seqcf_core::riskmodel::{train, TrainConfig};
use seqcf_core::rng::CounterRng;
use seqcf_core::seqcf::{
    candidate_interventions, propagate, propagate_deterministic, propagate_stochastic, rank_order,
    search_interventions, Action, Intervention, PropagationConfig, PropagationMode,
};
use seqcf_core::{Cohort, FeatureCatalog, Period, RiskModel, TaxonomyClass, TemporalFeatureVector};

struct World {
    catalog: Arc<FeatureCatalog>,
    cohort: Cohort,
    graph: DependencyGraph,
    model: RiskModel,
}

fn world(classes: &[TaxonomyClass], n: usize, seed: u64) -> World {
    let catalog = common::catalog(classes);
    let cohort = common::random_cohort(catalog.clone(), n, seed);
    let params = GraphParams {
        gamma: 1.5,
        min_support: 3,
        ..GraphParams::default()
    };
    let graph = estimate_graph(&cohort, &params).unwrap();
    let model = if cohort.cases() > 0 && cohort.cases() < cohort.len() {
        let cfg = TrainConfig {
            iterations: 50,
            ..TrainConfig::default()
        };
        train(&cohort, &cfg).unwrap()
    } else {
        RiskModel::zeros(catalog.len())
    };
    World {
        catalog,
        cohort,
        graph,
        model,
    }
}

fn classes_strategy() -> impl Strategy<Value = Vec<TaxonomyClass>> {
    use TaxonomyClass::*;
    prop::collection::vec(
        prop_oneof![Just(Immutable), Just(Controllable), Just(Intervention)],
        1..4,
    )
    .prop_map(|mut extra| {
        // Always at least one of each class.
        let mut v = vec![Immutable, Controllable, Intervention];
        v.append(&mut extra);
        v
    })
}

/// Interventions drawn from a bitmask over (intervention feature, period, action).
fn interventions_from(catalog: &FeatureCatalog, mask: u64) -> Vec<Intervention> {
    let mut out = Vec::new();
    let mut k = 0;
    for f in catalog.of_class(TaxonomyClass::Intervention) {
        for t in Period::ALL {
            if mask >> k & 1 == 1 {
                let action = if mask >> (k + 1) & 1 == 1 {
                    Action::Remove
                } else {
                    Action::Add
                };
                out.push(Intervention {
                    feature: f,
                    period: t,
                    action,
                });
            }
            k += 2;
        }
    }
    out
}

fn applied_roots(ivs: &[Intervention]) -> Vec<Vertex> {
    ivs.iter().map(|iv| Vertex::new(iv.feature, iv.period)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn deterministic_propagation_is_plausible_by_construction(
        classes in classes_strategy(),
        seed in any::<u64>(),
        mask in any::<u64>(),
        n in 30usize..90,
    ) {
        let w = world(&classes, n, seed);
        let ivs = interventions_from(&w.catalog, mask);
        for p in w.cohort.patients().iter().take(15) {
            let cf = propagate_deterministic(&w.catalog, &w.graph, &p.features, &ivs).unwrap();
            prop_assert!(check_p1(&w.catalog, &p.features, &cf).unwrap().is_empty());
            prop_assert!(check_p2(&w.catalog, &w.graph, &p.features, &cf).unwrap().is_empty());
            // Stricter than check_p2: the path starts at an applied intervention.
            let roots = applied_roots(&ivs);
            for (f, t) in p.features.diff(&cf) {
                if w.catalog.class(f) == TaxonomyClass::Intervention {
                    continue;
                }
                let v = Vertex::new(f, t);
                prop_assert!(roots.iter().any(|&r| w.graph.has_path(r, v)), "unexplained change at {:?}", v);
            }
        }
    }

    #[test]
    fn stochastic_majority_passes_p1(
        classes in classes_strategy(),
        seed in any::<u64>(),
        mask in any::<u64>(),
        prop_seed in any::<u64>(),
    ) {
        let w = world(&classes, 60, seed);
        let ivs = interventions_from(&w.catalog, mask);
        for p in w.cohort.patients().iter().take(5) {
            let (cf, summary) =
                propagate_stochastic(&w.model, &w.catalog, &w.graph, &p.features, &ivs, 25, prop_seed).unwrap();
            prop_assert!(check_p1(&w.catalog, &p.features, &cf).unwrap().is_empty());
            prop_assert!(summary.mean >= 0.0 && summary.mean <= 1.0);
            for iv in &ivs {
                prop_assert_eq!(cf.get(iv.feature, iv.period), iv.action == Action::Add);
            }
        }
    }

    #[test]
    fn empty_intervention_list_is_identity(
        classes in classes_strategy(),
        seed in any::<u64>(),
    ) {
        let w = world(&classes, 50, seed);
        for p in w.cohort.patients() {
            let r = propagate(&w.model, &w.catalog, &w.graph, &p.features, &[], &PropagationConfig::default()).unwrap();
            prop_assert_eq!(&r.counterfactual, &p.features);
            prop_assert_eq!(r.metrics.predictive_shift, 0.0);
            prop_assert_eq!(r.metrics.sparsity, 0);
            prop_assert!(!r.metrics.actionable);
            prop_assert!(r.plausibility.p1_ok && r.plausibility.p2_ok);
        }
    }

    #[test]
    fn childless_intervention_is_plain_application(
        classes in classes_strategy(),
        seed in any::<u64>(),
    ) {
        let w = world(&classes, 50, seed);
        // Last-period vertices have no children: nothing downstream can move.
        let f = w.catalog.of_class(TaxonomyClass::Intervention).next().unwrap();
        let v = Vertex::new(f, Period::Last);
        prop_assert!(w.graph.children(v).is_empty());
        for p in w.cohort.patients() {
            let action = if p.features.get(f, Period::Last) { Action::Remove } else { Action::Add };
            let iv = Intervention { feature: f, period: Period::Last, action };
            let cf = propagate_deterministic(&w.catalog, &w.graph, &p.features, &[iv]).unwrap();
            let mut expected = p.features.clone();
            expected.flip(f, Period::Last);
            prop_assert_eq!(cf, expected);
        }
    }

    #[test]
    fn propagation_is_reproducible(
        classes in classes_strategy(),
        seed in any::<u64>(),
        mask in any::<u64>(),
        prop_seed in any::<u64>(),
    ) {
        let w = world(&classes, 40, seed);
        let ivs = interventions_from(&w.catalog, mask);
        let p = &w.cohort.patients()[0];
        let cfg = PropagationConfig { mode: PropagationMode::Stochastic, n_samples: 30, seed: prop_seed, ..PropagationConfig::default() };
        let a = propagate(&w.model, &w.catalog, &w.graph, &p.features, &ivs, &cfg).unwrap();
        let b = propagate(&w.model, &w.catalog, &w.graph, &p.features, &ivs, &cfg).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let det = PropagationConfig::default();
        let a = propagate(&w.model, &w.catalog, &w.graph, &p.features, &ivs, &det).unwrap();
        let b = propagate(&w.model, &w.catalog, &w.graph, &p.features, &ivs, &det).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn identity_is_never_a_violation(
        classes in classes_strategy(),
        seed in any::<u64>(),
    ) {
        let w = world(&classes, 40, seed);
        for p in w.cohort.patients() {
            let v = verdict(&w.catalog, &w.graph, &p.features, &p.features).unwrap();
            prop_assert!(v.p1_ok && v.p2_ok);
            for (ok, c) in [(v.p1_ok, "P1"), (v.p2_ok, "P2"), (v.p3_ok, "P3")] {
                let listed = v.violations.iter().any(|x| format!("{:?}", x.constraint) == c);
                prop_assert_eq!(ok, !listed);
            }
        }
    }

    #[test]
    fn metrics_agree_with_diff(
        classes in classes_strategy(),
        seed in any::<u64>(),
        flips in prop::collection::vec(any::<prop::sample::Index>(), 0..6),
    ) {
        let w = world(&classes, 30, seed);
        let f = &w.cohort.patients()[0].features;
        let mut cf = f.clone();
        for ix in &flips {
            let (feat, t) = cf.coordinate(ix.index(3 * cf.dim()));
            cf.flip(feat, t);
        }
        let v = verdict(&w.catalog, &w.graph, f, &cf).unwrap();
        let m = compute_metrics(&w.model, &w.catalog, f, &cf, &v).unwrap();
        let ch = changes(&w.catalog, f, &cf);
        prop_assert_eq!(m.sparsity, ch.len());
        prop_assert_eq!(m.sparsity, f.hamming(&cf));
        prop_assert_eq!(
            m.actionable,
            ch.iter().any(|c| w.catalog.class(c.feature) == TaxonomyClass::Intervention)
        );
        prop_assert_eq!(m.plausible, v.p1_ok && v.p2_ok && v.p3_ok);
    }

    #[test]
    fn audit_is_permutation_invariant(
        classes in classes_strategy(),
        seed in any::<u64>(),
        shuffle in any::<u64>(),
    ) {
        let w = world(&classes, 60, seed);
        let mut idx: Vec<usize> = (0..w.cohort.len()).collect();
        CounterRng::new(shuffle).shuffle(0, &mut idx);
        let a = audit_naive(&w.cohort).unwrap();
        let b = audit_naive(&w.cohort.select(&idx)).unwrap();
        prop_assert_eq!(&a, &b);
        let pl = &a.patient_level;
        prop_assert!(pl.any.numerator >= pl.p1.numerator.max(pl.p2.numerator));
        for r in a.feature_level_p1.iter().chain(&a.feature_level_p2) {
            prop_assert!(r.cell.numerator <= r.cell.denominator);
        }
    }

    #[test]
    fn csv_round_trip(
        classes in classes_strategy(),
        seed in any::<u64>(),
    ) {
        let w = world(&classes, 25, seed);
        let text = save_cohort_csv(&w.cohort);
        let back = load_cohort(&text, w.catalog.clone(), CohortFormat::Csv).unwrap();
        prop_assert!(back.missing_columns.is_empty());
        prop_assert_eq!(back.cohort.patients(), w.cohort.patients());
        prop_assert_eq!(save_cohort_csv(&back.cohort), text);
    }

    #[test]
    fn flat_indexing_round_trips(bits in prop::collection::vec(any::<bool>(), 3..30)) {
        let n = bits.len() / 3 * 3;
        let tau = TemporalFeatureVector::from_flat(&bits[..n]).unwrap();
        for k in 0..n {
            let (f, t) = tau.coordinate(k);
            prop_assert_eq!(tau.flat_index(f, t), k);
            prop_assert_eq!(tau.get(f, t), bits[k]);
        }
    }
}

#[test]
fn search_ranking_matches_brute_force() {
    use TaxonomyClass::*;
    // Three intervention features at History and Past: six candidates.
    let w = world(
        &[
            Immutable,
            Controllable,
            Intervention,
            Controllable,
            Intervention,
            Intervention,
        ],
        120,
        9,
    );
    let cfg = PropagationConfig::default();
    let mut ranked = 0;
    for p in w.cohort.patients().iter().take(10) {
        let got = search_interventions(&w.model, &w.catalog, &w.graph, &p.features, &cfg, 2).unwrap();
        let cands = candidate_interventions(&w.catalog, &p.features);
        assert_eq!(cands.len(), 6);
        let mut all = Vec::new();
        for i in 0..cands.len() {
            all.push(vec![cands[i]]);
        }
        for i in 0..cands.len() {
            for j in i + 1..cands.len() {
                all.push(vec![cands[i], cands[j]]);
            }
        }
        let mut expected: Vec<_> = all
            .iter()
            .map(|set| propagate(&w.model, &w.catalog, &w.graph, &p.features, set, &cfg).unwrap())
            .filter(|r| r.metrics.predictive_shift > 0.0)
            .collect();
        expected.sort_by(rank_order);
        assert_eq!(got, expected);
        ranked += got.len();
        assert!(
            search_interventions(&w.model, &w.catalog, &w.graph, &p.features, &cfg, 0)
                .unwrap()
                .is_empty()
        );
    }
    assert!(ranked > 0);
}

#[test]
fn stochastic_mean_converges() {
    use TaxonomyClass as C;
    let w = world(
        &[C::Immutable, C::Controllable, C::Intervention, C::Controllable],
        150,
        4,
    );
    let f = w.catalog.of_class(C::Intervention).next().unwrap();
    for p in w.cohort.patients().iter().take(5) {
        let iv = [Intervention {
            feature: f,
            period: Period::History,
            action: Action::Add,
        }];
        let n = 400;
        let (_, a) = propagate_stochastic(&w.model, &w.catalog, &w.graph, &p.features, &iv, n, 3).unwrap();
        let (_, b) = propagate_stochastic(&w.model, &w.catalog, &w.graph, &p.features, &iv, 2 * n, 3).unwrap();
        let bound = 2.0 / (n as f64).sqrt() * a.stddev.max(1e-12);
        assert!(
            (a.mean - b.mean).abs() < bound,
            "{} vs {} (bound {bound})",
            a.mean,
            b.mean
        );
    }
}
