//! Fairness and alignment metrics.
//!
//! * [`normalized_entropy`]: Shannon entropy of a categorical distribution
//!   divided by `ln k`, where `k` counts every category of the attribute,
//!   observed or not. 1 means perfectly even representation.
//! * [`clip_t`]: mean cosine similarity between image embeddings and the
//!   embeddings of the prompts that produced them.
//! * [`kernel`]: unbiased MMD² (Gaussian kernel) and KID (cubic polynomial
//!   kernel) between two embedding sets.

pub mod kernel;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingVector};

pub use kernel::{kid, kid_subsets, median_heuristic_bandwidth, mmd2_rbf};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("distribution has no observations")]
    EmptyDistribution,
    #[error("entropy needs at least 2 categories, got {0}")]
    TooFewCategories(usize),
    #[error("unknown category '{0}'")]
    UnknownCategory(String),
    #[error("no pairs to average")]
    EmptyPairs,
    #[error("no entropies to aggregate")]
    EmptyAggregation,
    #[error("embedding set needs at least 2 vectors, got {0}")]
    SetTooSmall(usize),
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("subset size {size} exceeds set size {available}")]
    SubsetTooLarge { size: usize, available: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Category counts for one attribute. `k` is the number of declared
/// categories, including ones that were never observed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "IndexMap<String, u64>", into = "IndexMap<String, u64>")]
pub struct CategoricalDistribution {
    categories: Vec<String>,
    counts: Vec<u64>,
}

impl CategoricalDistribution {
    pub fn new<S: AsRef<str>>(categories: &[S]) -> Self {
        Self {
            categories: categories.iter().map(|c| c.as_ref().to_string()).collect(),
            counts: vec![0; categories.len()],
        }
    }

    pub fn from_counts<S: AsRef<str>>(categories: &[S], counts: &[u64]) -> Self {
        assert_eq!(categories.len(), counts.len(), "one count per category");
        Self {
            categories: categories.iter().map(|c| c.as_ref().to_string()).collect(),
            counts: counts.to_vec(),
        }
    }

    pub fn record(&mut self, category: &str) -> Result<(), MetricsError> {
        let i = self
            .categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| MetricsError::UnknownCategory(category.to_string()))?;
        self.counts[i] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.categories.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, category: &str) -> Option<u64> {
        self.categories
            .iter()
            .position(|c| c == category)
            .map(|i| self.counts[i])
    }

    /// Empirical probabilities `count_j / total`, or `None` when empty.
    pub fn probabilities(&self) -> Option<Vec<f64>> {
        let total = self.total();
        (total > 0).then(|| {
            self.counts
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect()
        })
    }

    pub fn merge(&mut self, other: &CategoricalDistribution) {
        assert_eq!(self.categories, other.categories, "same category list");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

impl From<IndexMap<String, u64>> for CategoricalDistribution {
    fn from(map: IndexMap<String, u64>) -> Self {
        Self {
            categories: map.keys().cloned().collect(),
            counts: map.values().copied().collect(),
        }
    }
}

impl From<CategoricalDistribution> for IndexMap<String, u64> {
    fn from(d: CategoricalDistribution) -> Self {
        d.categories.into_iter().zip(d.counts).collect()
    }
}

/// Bias-normalized entropy `H' = -(1/ln k) Σ p ln p`, with `0 ln 0 = 0`.
pub fn normalized_entropy(dist: &CategoricalDistribution) -> Result<f64, MetricsError> {
    let k = dist.k();
    if k < 2 {
        return Err(MetricsError::TooFewCategories(k));
    }
    let total = dist.total();
    if total == 0 {
        return Err(MetricsError::EmptyDistribution);
    }
    let nonzero: Vec<u64> = dist.counts().iter().copied().filter(|&c| c > 0).collect();
    if nonzero.len() == 1 {
        return Ok(0.0);
    }
    if nonzero.len() == k && nonzero.iter().all(|&c| c == nonzero[0]) {
        return Ok(1.0);
    }
    let total = total as f64;
    let h: f64 = nonzero
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (k as f64).ln()).clamp(0.0, 1.0))
}

/// Mean cosine similarity over `(image, prompt)` pairs.
pub fn clip_t(pairs: &[(&EmbeddingVector, &EmbeddingVector)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    let mut sum = 0.0;
    for (image, prompt) in pairs {
        sum += image.cosine(prompt)?;
    }
    Ok((sum / pairs.len() as f64).clamp(-1.0, 1.0))
}

/// How per-attribute entropies collapse into one fairness score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

pub fn fairness_score(
    entropies: impl IntoIterator<Item = f64>,
    aggregation: Aggregation,
) -> Result<f64, MetricsError> {
    let values: Vec<f64> = entropies.into_iter().collect();
    if values.is_empty() {
        return Err(MetricsError::EmptyAggregation);
    }
    Ok(match aggregation {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Metrics for one batch of generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub per_attribute_entropy: IndexMap<String, f64>,
    pub clip_t: f64,
    pub fairness_score: f64,
}

impl MetricSnapshot {
    pub fn from_distributions(
        distributions: &IndexMap<String, CategoricalDistribution>,
        clip_t: f64,
        aggregation: Aggregation,
    ) -> Result<Self, MetricsError> {
        let mut per_attribute_entropy = IndexMap::new();
        for (name, dist) in distributions {
            per_attribute_entropy.insert(name.clone(), normalized_entropy(dist)?);
        }
        let fairness_score = fairness_score(per_attribute_entropy.values().copied(), aggregation)?;
        Ok(Self {
            per_attribute_entropy,
            clip_t,
            fairness_score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(counts: &[u64]) -> CategoricalDistribution {
        let cats: Vec<String> = (0..counts.len()).map(|i| format!("c{i}")).collect();
        CategoricalDistribution::from_counts(&cats, counts)
    }

    #[test]
    fn entropy_golden_values() {
        assert_eq!(normalized_entropy(&dist(&[10, 10])).unwrap(), 1.0);
        assert_eq!(normalized_entropy(&dist(&[20, 0])).unwrap(), 0.0);
        assert_eq!(normalized_entropy(&dist(&[5, 5, 5, 5])).unwrap(), 1.0);
        // -(0.9 ln 0.9 + 0.1 ln 0.1) / ln 2, evaluated with mpmath at 50 digits
        let expected = 0.468_995_593_589_281_2;
        assert!((normalized_entropy(&dist(&[18, 2])).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn entropy_counts_unobserved_categories_in_k() {
        // (10, 10, 0, 0) over k=4 is ln 2 / ln 4 = 0.5
        let h = normalized_entropy(&dist(&[10, 10, 0, 0])).unwrap();
        assert!((h - 0.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_errors() {
        assert_eq!(
            normalized_entropy(&dist(&[0, 0])),
            Err(MetricsError::EmptyDistribution)
        );
        assert_eq!(
            normalized_entropy(&dist(&[3])),
            Err(MetricsError::TooFewCategories(1))
        );
    }

    #[test]
    fn clip_t_examples() {
        let e0 = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let e1 = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(clip_t(&[(&e0, &e0)]).unwrap(), 1.0);
        assert_eq!(clip_t(&[(&e0, &e1)]).unwrap(), 0.0);

        let at = |c: f64| EmbeddingVector::new(vec![c, (1.0 - c * c).sqrt()]).unwrap();
        let (a, b) = (at(0.2), at(0.4));
        let v = clip_t(&[(&a, &e0), (&b, &e0)]).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        assert_eq!(clip_t(&[]), Err(MetricsError::EmptyPairs));

        let short = EmbeddingVector::new(vec![1.0]).unwrap();
        assert!(matches!(
            clip_t(&[(&e0, &short)]),
            Err(MetricsError::Embedding(EmbeddingError::DimensionMismatch(2, 1)))
        ));
    }

    #[test]
    fn fairness_aggregations() {
        let v = fairness_score([0.4, 0.6], Aggregation::Mean).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(fairness_score([0.4, 0.6], Aggregation::Min).unwrap(), 0.4);
        assert_eq!(fairness_score([0.7], Aggregation::Mean).unwrap(), 0.7);
        assert_eq!(fairness_score([0.7], Aggregation::Min).unwrap(), 0.7);
        assert_eq!(
            fairness_score([], Aggregation::Mean),
            Err(MetricsError::EmptyAggregation)
        );
    }

    #[test]
    fn distribution_serializes_as_ordered_map() {
        let d = CategoricalDistribution::from_counts(&["female", "male"], &[3, 1]);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, r#"{"female":3,"male":1}"#);
        let back: CategoricalDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn moving_mass_toward_the_minimum_increases_entropy() {
        // Exhaustive over small count vectors. A move only strictly helps when
        // max - min >= 2; with a gap of 1 it just permutes the counts.
        for k in 2..=4usize {
            let mut counts = vec![0u64; k];
            loop {
                let max = *counts.iter().max().unwrap();
                let min = *counts.iter().min().unwrap();
                if counts.iter().sum::<u64>() > 0 && max >= min + 2 {
                    let hi = counts.iter().position(|&c| c == max).unwrap();
                    let lo = counts.iter().position(|&c| c == min).unwrap();
                    let mut moved = counts.clone();
                    moved[hi] -= 1;
                    moved[lo] += 1;
                    let before = normalized_entropy(&dist(&counts)).unwrap();
                    let after = normalized_entropy(&dist(&moved)).unwrap();
                    assert!(after > before, "{counts:?} -> {moved:?}");
                }
                // odometer over 0..=6
                let mut i = 0;
                while i < k {
                    counts[i] += 1;
                    if counts[i] <= 6 {
                        break;
                    }
                    counts[i] = 0;
                    i += 1;
                }
                if i == k {
                    break;
                }
            }
        }
    }

    proptest! {
        #[test]
        fn entropy_is_bounded_permutation_and_scale_invariant(
            counts in prop::collection::vec(0u64..50, 2..6),
            scale in 1u64..10,
            rotation in 0usize..6,
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let h = normalized_entropy(&dist(&counts)).unwrap();
            prop_assert!((0.0..=1.0).contains(&h));

            let mut rotated = counts.clone();
            let r = rotation % counts.len();
            rotated.rotate_left(r);
            let mut reversed = counts.clone();
            reversed.reverse();
            let scaled: Vec<u64> = counts.iter().map(|c| c * scale).collect();
            for other in [rotated, reversed, scaled] {
                let h2 = normalized_entropy(&dist(&other)).unwrap();
                prop_assert!((h - h2).abs() < 1e-12);
            }
        }

        #[test]
        fn clip_t_is_order_invariant_and_bounded(
            cosines in prop::collection::vec(-1.0f64..1.0, 1..12),
        ) {
            let anchor = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
            let images: Vec<EmbeddingVector> = cosines
                .iter()
                .map(|&c| EmbeddingVector::new(vec![c, (1.0 - c * c).sqrt()]).unwrap())
                .collect();
            let pairs: Vec<_> = images.iter().map(|i| (i, &anchor)).collect();
            let mut reversed = pairs.clone();
            reversed.reverse();
            let forward = clip_t(&pairs).unwrap();
            let backward = clip_t(&reversed).unwrap();
            prop_assert!((forward - backward).abs() < 1e-12);
            let lo = cosines.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(forward >= lo - 1e-12 && forward <= hi + 1e-12);
        }
    }
}
