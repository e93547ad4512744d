//! Regularized logistic scoring over the flattened (h, s, l) bits.
//!
//! Training is deterministic: zero-initialized weights, full-batch gradient
//! descent with a fixed iteration budget and step size, single-threaded
//! accumulation in patient order. The numeric core is generic over the
//! scalar type.

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, TemporalFeatureVector};
use crate::error::{Error, Result};
use crate::num::{sigmoid, softplus, Scalar};
use crate::rng::CounterRng;

/// Anything that maps a temporal feature vector to a risk in (0, 1).
pub trait RiskScorer {
    /// Number of catalog features `d` the scorer expects.
    fn dim(&self) -> usize;

    /// Risk for a vector of matching dimension.
    fn score(&self, tau: &TemporalFeatureVector) -> f64;

    fn try_score(&self, tau: &TemporalFeatureVector) -> Result<f64> {
        if tau.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: tau.dim(),
            });
        }
        Ok(self.score(tau))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regularization: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Seed of the train/test shuffle; training itself draws nothing.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regularization: 1.0,
            iterations: 500,
            step_size: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel<T: Scalar> {
    /// Per (period, feature) coefficient, period-major, then the intercept.
    #[serde(bound = "")]
    weights: Vec<T>,
    d: usize,
    meta: TrainConfig,
}

fn design<T: Scalar>(tau: &TemporalFeatureVector) -> impl Iterator<Item = T> + '_ {
    tau.flat()
        .map(|b| if b { T::one() } else { T::zero() })
        .chain(std::iter::once(T::one()))
}

impl<T: Scalar> LogisticModel<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            weights: vec![T::zero(); 3 * d + 1],
            d,
            meta: TrainConfig::default(),
        }
    }

    pub fn from_weights(weights: Vec<T>, d: usize) -> Result<Self> {
        if weights.len() != 3 * d + 1 {
            return Err(Error::DimensionMismatch {
                expected: 3 * d + 1,
                actual: weights.len(),
            });
        }
        Ok(Self {
            weights,
            d,
            meta: TrainConfig::default(),
        })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn meta(&self) -> &TrainConfig {
        &self.meta
    }

    pub fn intercept(&self) -> T {
        self.weights[3 * self.d]
    }

    pub fn linear_predictor(&self, tau: &TemporalFeatureVector) -> T {
        linear(&self.weights, tau)
    }

    pub fn probability(&self, tau: &TemporalFeatureVector) -> Result<T> {
        if tau.dim() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: tau.dim(),
            });
        }
        Ok(sigmoid(self.linear_predictor(tau)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(source: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(source)?;
        if m.weights.len() != 3 * m.d + 1 {
            return Err(Error::DimensionMismatch {
                expected: 3 * m.d + 1,
                actual: m.weights.len(),
            });
        }
        Ok(m)
    }
}

impl<T: Scalar> RiskScorer for LogisticModel<T> {
    fn dim(&self) -> usize {
        self.d
    }

    fn score(&self, tau: &TemporalFeatureVector) -> f64 {
        sigmoid(self.linear_predictor(tau)).as_f64()
    }
}

fn linear<T: Scalar>(w: &[T], tau: &TemporalFeatureVector) -> T {
    design::<T>(tau).zip(w).fold(T::zero(), |acc, (x, &wi)| acc + x * wi)
}

/// Free-function form of [`RiskScorer::try_score`].
pub fn score(model: &impl RiskScorer, tau: &TemporalFeatureVector) -> Result<f64> {
    model.try_score(tau)
}

/// Set-bit indices per patient; the intercept column is implicit.
struct Design<T> {
    rows: Vec<Vec<usize>>,
    y: Vec<T>,
}

impl<T: Scalar> Design<T> {
    fn new(cohort: &Cohort) -> Self {
        let rows = cohort
            .patients()
            .iter()
            .map(|p| {
                p.features
                    .flat()
                    .enumerate()
                    .filter(|&(_, b)| b)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        let y = cohort
            .patients()
            .iter()
            .map(|p| if p.outcome { T::one() } else { T::zero() })
            .collect();
        Self { rows, y }
    }

    fn n(&self) -> T {
        T::from_usize(self.rows.len().max(1)).expect("usize fits")
    }

    fn linear(&self, row: usize, w: &[T]) -> T {
        self.rows[row].iter().fold(T::zero(), |acc, &i| acc + w[i]) + w[w.len() - 1]
    }

    fn loss(&self, w: &[T], lambda: T) -> T {
        let mut total = T::zero();
        for (row, &y) in self.y.iter().enumerate() {
            let z = self.linear(row, w);
            total += softplus(z) - y * z;
        }
        let penalty = w[..w.len() - 1].iter().fold(T::zero(), |acc, &wi| acc + wi * wi);
        let n = self.n();
        total / n + lambda * penalty / (T::lit(2.0) * n)
    }

    fn gradient(&self, w: &[T], lambda: T) -> Vec<T> {
        let mut g = vec![T::zero(); w.len()];
        let last = w.len() - 1;
        for (row, &y) in self.y.iter().enumerate() {
            let r = sigmoid(self.linear(row, w)) - y;
            for &i in &self.rows[row] {
                g[i] += r;
            }
            g[last] += r;
        }
        let n = self.n();
        for (j, gi) in g.iter_mut().enumerate() {
            *gi /= n;
            if j < last {
                *gi += lambda * w[j] / n;
            }
        }
        g
    }
}

/// Mean log-loss plus `lambda / (2n) * |w|^2` (intercept unpenalized).
pub fn loss<T: Scalar>(cohort: &Cohort, weights: &[T], lambda: T) -> T {
    Design::new(cohort).loss(weights, lambda)
}

/// Analytic gradient of [`loss`].
pub fn gradient<T: Scalar>(cohort: &Cohort, weights: &[T], lambda: T) -> Vec<T> {
    Design::new(cohort).gradient(weights, lambda)
}

fn check_classes(cohort: &Cohort) -> Result<()> {
    let cases = cohort.cases();
    if cases == 0 || cases == cohort.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Fit by full-batch gradient descent. Returns the model and the loss
/// before each iteration followed by the final loss.
pub fn train_with_trace<T: Scalar>(cohort: &Cohort, config: &TrainConfig) -> Result<(LogisticModel<T>, Vec<T>)> {
    check_classes(cohort)?;
    if !(config.regularization >= 0.0 && config.regularization.is_finite()) {
        return Err(Error::config("regularization", "must be a non-negative real"));
    }
    if !(config.step_size > 0.0 && config.step_size.is_finite()) {
        return Err(Error::config("step_size", "must be a positive real"));
    }
    let d = cohort.catalog().len();
    let lambda = T::lit(config.regularization);
    let step = T::lit(config.step_size);
    let mut w = vec![T::zero(); 3 * d + 1];
    let x = Design::new(cohort);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for _ in 0..config.iterations {
        trace.push(x.loss(&w, lambda));
        let g = x.gradient(&w, lambda);
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= step * gi;
        }
    }
    trace.push(x.loss(&w, lambda));
    Ok((
        LogisticModel {
            weights: w,
            d,
            meta: config.clone(),
        },
        trace,
    ))
}

pub fn train<T: Scalar>(cohort: &Cohort, config: &TrainConfig) -> Result<LogisticModel<T>> {
    Ok(train_with_trace(cohort, config)?.0)
}

/// Area under the ROC curve in the Mann-Whitney form, ties counted 1/2.
pub fn auroc_scores<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let n1 = labels.iter().filter(|&&y| y).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores are not NaN"));
    // Average ranks over tie groups.
    let mut rank_sum_cases = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_cases += avg_rank;
            }
        }
        i = j + 1;
    }
    let (n1, n0) = (n1 as f64, n0 as f64);
    Ok((rank_sum_cases - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

pub fn auroc(model: &impl RiskScorer, cohort: &Cohort) -> Result<f64> {
    let scores: Vec<f64> = cohort
        .patients()
        .iter()
        .map(|p| model.try_score(&p.features))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = cohort.patients().iter().map(|p| p.outcome).collect();
    auroc_scores(&scores, &labels)
}

/// Max |analytic - central difference| over all gradient coordinates.
pub fn finite_difference_gradient_check<T: Scalar>(cohort: &Cohort, weights: &[T], lambda: T, step: T) -> T {
    let analytic = gradient(cohort, weights, lambda);
    let mut w = weights.to_vec();
    let mut worst = T::zero();
    for j in 0..w.len() {
        let orig = w[j];
        w[j] = orig + step;
        let up = loss(cohort, &w, lambda);
        w[j] = orig - step;
        let down = loss(cohort, &w, lambda);
        w[j] = orig;
        let fd = (up - down) / (T::lit(2.0) * step);
        worst = worst.max((fd - analytic[j]).abs());
    }
    worst
}

/// Shuffle with `seed`, then hold out the last 20% of patients.
pub fn train_test_split(cohort: &Cohort, seed: u64) -> (Cohort, Cohort) {
    let mut idx: Vec<usize> = (0..cohort.len()).collect();
    CounterRng::new(seed).shuffle(0, &mut idx);
    let n_train = cohort.len() * 4 / 5;
    (cohort.select(&idx[..n_train]), cohort.select(&idx[n_train..]))
}
