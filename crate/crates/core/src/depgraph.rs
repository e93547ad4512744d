//! Temporal dependency graph over (feature, period) vertices and the
//! conditional probability tables used for propagation.
//!
//! An estimated edge (i, t) -> (j, t') with t < t' is retained when both
//! conditioning strata have at least `min_support` patients and the relative
//! risk of j at t' given i at t exceeds `gamma`. Catalog pathways are injected
//! for every forward period pair regardless of their risk ratio.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::catalog::{FeatureCatalog, FeatureId};
use crate::cohort::{Cohort, Period, TemporalFeatureVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vertex {
    pub feature: FeatureId,
    pub period: Period,
}

impl Vertex {
    pub fn new(feature: FeatureId, period: Period) -> Self {
        Self { feature, period }
    }
}

// Topological order: by period, then feature index.
impl Ord for Vertex {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.period, self.feature).cmp(&(other.period, other.feature))
    }
}

impl PartialOrd for Vertex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSource {
    Estimated,
    Pathway,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub n_src1: usize,
    pub n_src1_dst1: usize,
    pub n_src0: usize,
    pub n_src0_dst1: usize,
}

impl EdgeCounts {
    /// Risk ratio from the 2x2 counts; `None` when a denominator or the
    /// unexposed numerator is zero.
    pub fn relative_risk(&self) -> Option<f64> {
        if self.n_src1 == 0 || self.n_src0 == 0 || self.n_src0_dst1 == 0 {
            return None;
        }
        let p1 = self.n_src1_dst1 as f64 / self.n_src1 as f64;
        let p0 = self.n_src0_dst1 as f64 / self.n_src0 as f64;
        Some(p1 / p0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: Vertex,
    pub dst: Vertex,
    pub relative_risk: Option<f64>,
    pub counts: EdgeCounts,
    pub source: EdgeSource,
}

/// Laplace-smoothed estimates of P(target = 1 | parent bits).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    pub target: Vertex,
    /// Sorted in topological order; parent `k` is bit `k` of a pattern.
    pub parents: Vec<Vertex>,
    /// pattern -> (stratum size, positives)
    pub entries: BTreeMap<u64, (usize, usize)>,
    pub marginal: f64,
    pub alpha: f64,
}

impl ConditionalTable {
    pub fn pattern_of(&self, tau: &TemporalFeatureVector) -> u64 {
        self.parents
            .iter()
            .enumerate()
            .fold(0u64, |acc, (k, v)| acc | ((tau.get(v.feature, v.period) as u64) << k))
    }

    pub fn probability_of_pattern(&self, pattern: u64) -> f64 {
        match self.entries.get(&pattern) {
            Some(&(n, k)) if n > 0 => (k as f64 + self.alpha) / (n as f64 + 2.0 * self.alpha),
            _ => self.marginal,
        }
    }

    /// P(target = 1 | parents) for explicit parent bits.
    pub fn probability(&self, parent_bits: &[bool]) -> Result<f64> {
        if parent_bits.len() != self.parents.len() {
            return Err(Error::DimensionMismatch {
                expected: self.parents.len(),
                actual: parent_bits.len(),
            });
        }
        let pattern = parent_bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (k, &b)| acc | ((b as u64) << k));
        Ok(self.probability_of_pattern(pattern))
    }

    /// P(target = 1 | parents as set in `tau`).
    pub fn probability_for(&self, tau: &TemporalFeatureVector) -> f64 {
        self.probability_of_pattern(self.pattern_of(tau))
    }
}

pub fn conditional_probability(table: &ConditionalTable, parent_bits: &[bool]) -> Result<f64> {
    table.probability(parent_bits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub gamma: f64,
    pub min_support: usize,
    pub alpha: f64,
    /// Cap on estimated-edge parents per table; pathway sources and the
    /// vertex's own earlier period come on top.
    pub max_parents: usize,
    pub epsilon: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            min_support: 25,
            alpha: 1.0,
            max_parents: 4,
            epsilon: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    codes: Vec<String>,
    edges: Vec<Edge>,
    tables: Vec<ConditionalTable>,
    table_index: HashMap<Vertex, usize>,
    /// Propagation links: edges plus CPT parent links, keyed by source.
    children: HashMap<Vertex, Vec<Vertex>>,
    pub gamma: f64,
    pub min_support: usize,
    pub alpha: f64,
    /// P3 threshold on the factorized Last-period probability.
    pub epsilon: f64,
}

fn column(cohort: &Cohort, v: Vertex) -> Vec<bool> {
    cohort
        .patients()
        .iter()
        .map(|p| p.features.get(v.feature, v.period))
        .collect()
}

fn counts(src: &[bool], dst: &[bool]) -> EdgeCounts {
    let mut c = EdgeCounts::default();
    for (&a, &b) in src.iter().zip(dst) {
        if a {
            c.n_src1 += 1;
            c.n_src1_dst1 += b as usize;
        } else {
            c.n_src0 += 1;
            c.n_src0_dst1 += b as usize;
        }
    }
    c
}

const FORWARD_PAIRS: [(Period, Period); 3] = [
    (Period::History, Period::Past),
    (Period::History, Period::Last),
    (Period::Past, Period::Last),
];

pub fn estimate_graph(cohort: &Cohort, params: &GraphParams) -> Result<DependencyGraph> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if params.gamma.is_nan() || params.gamma <= 0.0 {
        return Err(Error::config("gamma", "must be a positive real"));
    }
    if !(params.alpha > 0.0 && params.alpha.is_finite()) {
        return Err(Error::config("alpha", "must be a positive real"));
    }
    let cat = cohort.catalog();
    let cols: Vec<Vec<Vec<bool>>> = Period::ALL
        .iter()
        .map(|&t| cat.ids().map(|f| column(cohort, Vertex::new(f, t))).collect())
        .collect();
    let col = |v: Vertex| &cols[v.period.index()][v.feature.0];

    let pathway_pairs: BTreeSet<(FeatureId, FeatureId)> =
        cat.pathways().iter().map(|p| (p.intervention, p.target)).collect();

    let mut edges = Vec::new();
    for (t, t2) in FORWARD_PAIRS {
        for i in cat.ids() {
            for j in cat.ids() {
                let src = Vertex::new(i, t);
                let dst = Vertex::new(j, t2);
                let c = counts(col(src), col(dst));
                if pathway_pairs.contains(&(i, j)) {
                    edges.push(Edge {
                        src,
                        dst,
                        relative_risk: c.relative_risk(),
                        counts: c,
                        source: EdgeSource::Pathway,
                    });
                    continue;
                }
                if c.n_src1 < params.min_support || c.n_src0 < params.min_support {
                    continue;
                }
                if let Some(rr) = c.relative_risk() {
                    if rr > params.gamma {
                        edges.push(Edge {
                            src,
                            dst,
                            relative_risk: Some(rr),
                            counts: c,
                            source: EdgeSource::Estimated,
                        });
                    }
                }
            }
        }
    }
    edges.sort_by_key(|a| (a.dst, a.src));

    let mut tables = Vec::new();
    for t in [Period::Past, Period::Last] {
        for j in cat.ids() {
            let target = Vertex::new(j, t);
            let parents = select_parents(&edges, target, params.max_parents);
            tables.push(fit_table(target, parents, &col, params.alpha));
        }
    }
    Ok(DependencyGraph::assemble(
        cat.features().iter().map(|f| f.code.clone()).collect(),
        edges,
        tables,
        params,
    ))
}

fn select_parents(edges: &[Edge], target: Vertex, cap: usize) -> Vec<Vertex> {
    let incoming: Vec<&Edge> = edges.iter().filter(|e| e.dst == target).collect();
    let mut parents: BTreeSet<Vertex> = incoming
        .iter()
        .filter(|e| e.source == EdgeSource::Pathway)
        .map(|e| e.src)
        .collect();
    let mut estimated: Vec<&Edge> = incoming
        .into_iter()
        .filter(|e| e.source == EdgeSource::Estimated)
        .collect();
    estimated.sort_by(|a, b| {
        b.relative_risk
            .unwrap_or(0.0)
            .total_cmp(&a.relative_risk.unwrap_or(0.0))
            .then(a.src.cmp(&b.src))
    });
    parents.extend(estimated.iter().take(cap).map(|e| e.src));
    if let Some(prev) = target.period.previous() {
        parents.insert(Vertex::new(target.feature, prev));
    }
    parents.into_iter().collect()
}

fn fit_table<'a>(
    target: Vertex,
    parents: Vec<Vertex>,
    col: &impl Fn(Vertex) -> &'a Vec<bool>,
    alpha: f64,
) -> ConditionalTable {
    let y = col(target);
    let parent_cols: Vec<&Vec<bool>> = parents.iter().map(|&v| col(v)).collect();
    let mut entries: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for (i, &yi) in y.iter().enumerate() {
        let pattern = parent_cols
            .iter()
            .enumerate()
            .fold(0u64, |acc, (k, c)| acc | ((c[i] as u64) << k));
        let e = entries.entry(pattern).or_default();
        e.0 += 1;
        e.1 += yi as usize;
    }
    let positives = y.iter().filter(|&&b| b).count();
    ConditionalTable {
        target,
        parents,
        entries,
        marginal: positives as f64 / y.len() as f64,
        alpha,
    }
}

impl DependencyGraph {
    fn assemble(codes: Vec<String>, edges: Vec<Edge>, tables: Vec<ConditionalTable>, params: &GraphParams) -> Self {
        let table_index = tables.iter().enumerate().map(|(i, t)| (t.target, i)).collect();
        let mut children: HashMap<Vertex, Vec<Vertex>> = HashMap::new();
        let links = edges.iter().map(|e| (e.src, e.dst)).chain(
            tables
                .iter()
                .flat_map(|t| t.parents.iter().map(move |&p| (p, t.target))),
        );
        for (a, b) in links {
            let list = children.entry(a).or_default();
            if !list.contains(&b) {
                list.push(b);
            }
        }
        for list in children.values_mut() {
            list.sort();
        }
        Self {
            codes,
            edges,
            tables,
            table_index,
            children,
            gamma: params.gamma,
            min_support: params.min_support,
            alpha: params.alpha,
            epsilon: params.epsilon,
        }
    }

    /// Number of catalog features the graph was estimated over.
    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn tables(&self) -> &[ConditionalTable] {
        &self.tables
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        Period::ALL
            .into_iter()
            .flat_map(move |t| (0..self.dim()).map(move |i| Vertex::new(FeatureId(i), t)))
    }

    pub fn contains(&self, v: Vertex) -> bool {
        v.feature.0 < self.dim()
    }

    fn check(&self, v: Vertex) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::UnknownVertex {
                feature: v.feature.to_string(),
                period: v.period,
            })
        }
    }

    pub fn edge(&self, src: Vertex, dst: Vertex) -> Option<&Edge> {
        self.edges.iter().find(|e| e.src == src && e.dst == dst)
    }

    pub fn estimated_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.source == EdgeSource::Estimated)
    }

    pub fn table(&self, v: Vertex) -> Option<&ConditionalTable> {
        self.table_index.get(&v).map(|&i| &self.tables[i])
    }

    pub fn require_table(&self, v: Vertex) -> Result<&ConditionalTable> {
        self.table(v).ok_or_else(|| Error::MissingTable {
            feature: self
                .codes
                .get(v.feature.0)
                .cloned()
                .unwrap_or_else(|| v.feature.to_string()),
            period: v.period,
        })
    }

    /// Transitive predecessors of `v` over graph edges, excluding `v`.
    pub fn ancestors_of(&self, v: Vertex) -> Result<BTreeSet<Vertex>> {
        self.check(v)?;
        let mut seen = BTreeSet::new();
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            for e in self.edges.iter().filter(|e| e.dst == x) {
                if seen.insert(e.src) {
                    stack.push(e.src);
                }
            }
        }
        Ok(seen)
    }

    /// Direct successors along propagation links (edges and table parents).
    pub fn children(&self, v: Vertex) -> &[Vertex] {
        self.children.get(&v).map_or(&[], |c| c.as_slice())
    }

    /// Every vertex reachable from `v` along propagation links, excluding `v`.
    pub fn descendants_of(&self, v: Vertex) -> BTreeSet<Vertex> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            for &c in self.children(x) {
                if seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        seen
    }

    /// True when a directed path of propagation links leads from `src` to `dst`.
    pub fn has_path(&self, src: Vertex, dst: Vertex) -> bool {
        src != dst && self.descendants_of(src).contains(&dst)
    }

    /// Check the graph was built over `catalog`.
    pub fn check_catalog(&self, catalog: &FeatureCatalog) -> Result<()> {
        let codes: Vec<&str> = catalog.features().iter().map(|f| f.code.as_str()).collect();
        if codes.len() != self.codes.len() || codes.iter().zip(&self.codes).any(|(a, b)| a != b) {
            return Err(Error::ArtifactMismatch(
                "graph feature codes differ from the catalog".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VertexRecord {
    code: String,
    period: Period,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    src: VertexRecord,
    dst: VertexRecord,
    relative_risk: Option<f64>,
    counts: EdgeCounts,
    source: EdgeSource,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    /// Parent bits, first parent first.
    pattern: String,
    n: usize,
    positives: usize,
    probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRecord {
    target: VertexRecord,
    parents: Vec<VertexRecord>,
    marginal: f64,
    alpha: f64,
    entries: Vec<EntryRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    codes: Vec<String>,
    gamma: f64,
    min_support: usize,
    alpha: f64,
    epsilon: f64,
    vertices: Vec<VertexRecord>,
    edges: Vec<EdgeRecord>,
    tables: Vec<TableRecord>,
}

impl DependencyGraph {
    fn record(&self, v: Vertex) -> VertexRecord {
        VertexRecord {
            code: self.codes[v.feature.0].clone(),
            period: v.period,
        }
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            codes: self.codes.clone(),
            // serde_json cannot write infinity; an infinite gamma keeps no estimated edge anyway.
            gamma: if self.gamma.is_finite() { self.gamma } else { f64::MAX },
            min_support: self.min_support,
            alpha: self.alpha,
            epsilon: self.epsilon,
            vertices: self.vertices().map(|v| self.record(v)).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    src: self.record(e.src),
                    dst: self.record(e.dst),
                    relative_risk: e.relative_risk,
                    counts: e.counts,
                    source: e.source,
                })
                .collect(),
            tables: self
                .tables
                .iter()
                .map(|t| TableRecord {
                    target: self.record(t.target),
                    parents: t.parents.iter().map(|&p| self.record(p)).collect(),
                    marginal: t.marginal,
                    alpha: t.alpha,
                    entries: t
                        .entries
                        .iter()
                        .map(|(&pattern, &(n, positives))| EntryRecord {
                            pattern: (0..t.parents.len())
                                .map(|k| if pattern >> k & 1 == 1 { '1' } else { '0' })
                                .collect(),
                            n,
                            positives,
                            probability: t.probability_of_pattern(pattern),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn from_json(source: &str, catalog: &FeatureCatalog) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(source)?;
        let resolve = |r: &VertexRecord| -> Result<Vertex> { Ok(Vertex::new(catalog.require(&r.code)?, r.period)) };
        let mut edges = Vec::with_capacity(file.edges.len());
        for e in &file.edges {
            let (src, dst) = (resolve(&e.src)?, resolve(&e.dst)?);
            if src.period >= dst.period {
                return Err(Error::ArtifactMismatch(format!(
                    "edge {}@{} -> {}@{} does not go forward in time",
                    e.src.code, e.src.period, e.dst.code, e.dst.period
                )));
            }
            edges.push(Edge {
                src,
                dst,
                relative_risk: e.relative_risk,
                counts: e.counts,
                source: e.source,
            });
        }
        let mut tables = Vec::with_capacity(file.tables.len());
        for t in &file.tables {
            let parents = t.parents.iter().map(resolve).collect::<Result<Vec<_>>>()?;
            let mut entries = BTreeMap::new();
            for e in &t.entries {
                if e.pattern.len() != parents.len() {
                    return Err(Error::ArtifactMismatch(format!(
                        "table pattern `{}` has wrong length",
                        e.pattern
                    )));
                }
                let mut pattern = 0u64;
                for (k, ch) in e.pattern.chars().enumerate() {
                    match ch {
                        '0' => {}
                        '1' => pattern |= 1 << k,
                        _ => return Err(Error::ArtifactMismatch(format!("bad pattern `{}`", e.pattern))),
                    }
                }
                entries.insert(pattern, (e.n, e.positives));
            }
            tables.push(ConditionalTable {
                target: resolve(&t.target)?,
                parents,
                entries,
                marginal: t.marginal,
                alpha: t.alpha,
            });
        }
        let graph = DependencyGraph::assemble(
            file.codes,
            edges,
            tables,
            &GraphParams {
                gamma: file.gamma,
                min_support: file.min_support,
                alpha: file.alpha,
                max_parents: 0,
                epsilon: file.epsilon,
            },
        );
        graph.check_catalog(catalog)?;
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::cohort::Patient;

    fn two_feature_catalog() -> Arc<FeatureCatalog> {
        Arc::new(
            FeatureCatalog::from_json(
                r#"{"features": [
                    {"code": "I", "class": "immutable"},
                    {"code": "J", "class": "controllable"}]}"#,
            )
            .unwrap(),
        )
    }

    // rows: (i@history, j@last)
    fn cohort(rows: &[(bool, bool)]) -> Cohort {
        let patients = rows
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                let mut v = TemporalFeatureVector::zeros(2);
                v.set(FeatureId(0), Period::History, i);
                v.set(FeatureId(1), Period::Last, j);
                Patient {
                    patient_id: format!("p{k}"),
                    features: v,
                    outcome: false,
                }
            })
            .collect();
        Cohort::new(two_feature_catalog(), patients).unwrap()
    }

    #[test]
    fn eight_patient_rr_three() {
        // P(j | i) = 3/4, P(j | !i) = 1/4
        let c = cohort(&[
            (true, true),
            (true, true),
            (true, true),
            (true, false),
            (false, true),
            (false, false),
            (false, false),
            (false, false),
        ]);
        let params = GraphParams {
            min_support: 1,
            ..GraphParams::default()
        };
        let g = estimate_graph(&c, &params).unwrap();
        let e = g
            .edge(
                Vertex::new(FeatureId(0), Period::History),
                Vertex::new(FeatureId(1), Period::Last),
            )
            .expect("edge retained");
        assert!((e.relative_risk.unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(
            e.counts,
            EdgeCounts {
                n_src1: 4,
                n_src1_dst1: 3,
                n_src0: 4,
                n_src0_dst1: 1
            }
        );
        // Same toy under the default support floor keeps nothing.
        let strict = estimate_graph(&c, &GraphParams::default()).unwrap();
        assert_eq!(strict.estimated_edges().count(), 0);
    }

    #[test]
    fn independent_features_have_no_edge() {
        let c = cohort(&[(true, true), (true, false), (false, true), (false, false)]);
        let params = GraphParams {
            min_support: 1,
            ..GraphParams::default()
        };
        let g = estimate_graph(&c, &params).unwrap();
        assert!(g.estimated_edges().next().is_none());
    }

    #[test]
    fn laplace_smoothing_and_fallback() {
        let target = Vertex::new(FeatureId(1), Period::Last);
        let table = ConditionalTable {
            target,
            parents: vec![Vertex::new(FeatureId(0), Period::History)],
            entries: BTreeMap::from([(1, (8, 5))]),
            marginal: 0.03,
            alpha: 1.0,
        };
        assert!((conditional_probability(&table, &[true]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(conditional_probability(&table, &[false]).unwrap(), 0.03);
        assert!(conditional_probability(&table, &[true, false]).is_err());
    }

    #[test]
    fn ancestors_follow_edges_backwards() {
        let c = cohort(&[
            (true, true),
            (true, true),
            (true, true),
            (true, false),
            (false, true),
            (false, false),
            (false, false),
            (false, false),
        ]);
        let params = GraphParams {
            min_support: 1,
            ..GraphParams::default()
        };
        let g = estimate_graph(&c, &params).unwrap();
        let aki = Vertex::new(FeatureId(1), Period::Last);
        let src = Vertex::new(FeatureId(0), Period::History);
        assert_eq!(g.ancestors_of(aki).unwrap(), BTreeSet::from([src]));
        assert!(g.ancestors_of(src).unwrap().is_empty());
        assert!(g.ancestors_of(Vertex::new(FeatureId(9), Period::Last)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = cohort(&[
            (true, true),
            (true, true),
            (true, true),
            (true, false),
            (false, true),
            (false, false),
            (false, false),
            (false, false),
        ]);
        let g = estimate_graph(
            &c,
            &GraphParams {
                min_support: 1,
                ..GraphParams::default()
            },
        )
        .unwrap();
        let back = DependencyGraph::from_json(&g.to_json(), c.catalog()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn empty_cohort_is_an_error() {
        assert!(matches!(
            estimate_graph(&cohort(&[]), &GraphParams::default()),
            Err(Error::EmptyCohort)
        ));
    }
}
