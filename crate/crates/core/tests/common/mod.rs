#![allow(dead_code)]

use std::sync::Arc;

use seqcf_core::rng::CounterRng;
use seqcf_core::{Cohort, FeatureCatalog, Patient, TaxonomyClass, TemporalFeatureVector};

/// Catalog with the given classes; features are named F0, F1, ...
/// Every Intervention feature gets a pathway to the first Controllable one.
pub fn catalog(classes: &[TaxonomyClass]) -> Arc<FeatureCatalog> {
    let features: Vec<String> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| format!(r#"{{"code": "F{i}", "class": "{c}"}}"#))
        .collect();
    let target = classes.iter().position(|&c| c == TaxonomyClass::Controllable);
    let pathways: Vec<String> = match target {
        Some(t) => classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == TaxonomyClass::Intervention)
            .map(|(i, _)| format!(r#"{{"intervention": "F{i}", "target": "F{t}"}}"#))
            .collect(),
        None => Vec::new(),
    };
    let json = format!(
        r#"{{"features": [{}], "pathways": [{}]}}"#,
        features.join(","),
        pathways.join(",")
    );
    Arc::new(FeatureCatalog::from_json(&json).expect("toy catalog"))
}

pub fn mixed_catalog() -> Arc<FeatureCatalog> {
    use TaxonomyClass::*;
    catalog(&[
        Immutable,
        Immutable,
        Controllable,
        Controllable,
        Intervention,
        Intervention,
    ])
}

pub fn random_vector(rng: &CounterRng, stream: u64, d: usize, density: f64) -> TemporalFeatureVector {
    let bits: Vec<bool> = (0..3 * d).map(|k| rng.uniform(stream, k as u64) < density).collect();
    TemporalFeatureVector::from_flat(&bits).unwrap()
}

/// Random cohort with correlated structure: each Past/Last bit copies the
/// feature's earlier bit with high probability, and the outcome leans on the
/// last feature set.
pub fn random_cohort(catalog: Arc<FeatureCatalog>, n: usize, seed: u64) -> Cohort {
    let rng = CounterRng::new(seed);
    let d = catalog.len();
    let patients = (0..n)
        .map(|i| {
            let r = rng.fork(i as u64);
            let mut bits = vec![false; 3 * d];
            for f in 0..d {
                bits[f] = r.uniform(f as u64, 0) < 0.4;
                for t in 1..3 {
                    let prev = bits[(t - 1) * d + f];
                    let u = r.uniform(f as u64, t as u64);
                    bits[t * d + f] = if prev { u < 0.8 } else { u < 0.15 };
                }
            }
            let weight = bits.iter().filter(|&&b| b).count() as f64 / (3 * d) as f64;
            Patient {
                patient_id: format!("T{i:03}"),
                features: TemporalFeatureVector::from_flat(&bits).unwrap(),
                outcome: r.uniform(u64::MAX, 0) < 0.15 + 0.6 * weight,
            }
        })
        .collect();
    Cohort::new(catalog, patients).unwrap()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Dense logistic score written out longhand.
pub fn dense_score(weights: &[f64], tau: &TemporalFeatureVector) -> f64 {
    let z: f64 = tau
        .flat()
        .zip(weights)
        .map(|(b, w)| if b { *w } else { 0.0 })
        .sum::<f64>()
        + weights[weights.len() - 1];
    sigmoid(z)
}
