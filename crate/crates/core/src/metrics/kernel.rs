//! Unbiased kernel two-sample statistics between embedding sets.
//!
//! Both estimators compute
//!
//! ```text
//! MMD²_u = 1/(m(m-1)) Σ_{i≠j} k(x_i, x_j)
//!        + 1/(n(n-1)) Σ_{i≠j} k(y_i, y_j)
//!        - 2/(mn)     Σ_{i,j} k(x_i, y_j)
//! ```
//!
//! which can be slightly negative. Row sums are computed in parallel and then
//! reduced with a fixed pairwise tree, so results do not depend on the
//! number of worker threads.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::MetricsError;
use crate::embedding::EmbeddingVector;

/// Gaussian kernel `exp(-‖x-y‖² / (2σ²))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

/// Cubic polynomial kernel `(x·y/d + 1)³`.
pub fn kid_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² with a Gaussian kernel of the given bandwidth.
pub fn mmd2_rbf(
    x: &[EmbeddingVector],
    y: &[EmbeddingVector],
    bandwidth: f64,
) -> Result<f64, MetricsError> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(MetricsError::InvalidBandwidth(bandwidth));
    }
    unbiased_mmd2(x, y, |a, b| rbf_kernel(a, b, bandwidth))
}

/// Kernel Inception Distance: unbiased MMD² with `(x·y/d + 1)³`, over the
/// full sets.
pub fn kid(x: &[EmbeddingVector], y: &[EmbeddingVector]) -> Result<f64, MetricsError> {
    unbiased_mmd2(x, y, kid_kernel)
}

/// KID averaged over `n_subsets` random subsets of `subset_size` drawn
/// without replacement from each set. Meant for sets too large for the full
/// O(n²) estimate.
pub fn kid_subsets(
    x: &[EmbeddingVector],
    y: &[EmbeddingVector],
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if subset_size < 2 {
        return Err(MetricsError::SetTooSmall(subset_size));
    }
    for set in [x, y] {
        if subset_size > set.len() {
            return Err(MetricsError::SubsetTooLarge {
                size: subset_size,
                available: set.len(),
            });
        }
    }
    if n_subsets == 0 {
        return Err(MetricsError::EmptyAggregation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let xs: Vec<EmbeddingVector> = sample(&mut rng, x.len(), subset_size)
            .into_iter()
            .map(|i| x[i].clone())
            .collect();
        let ys: Vec<EmbeddingVector> = sample(&mut rng, y.len(), subset_size)
            .into_iter()
            .map(|i| y[i].clone())
            .collect();
        values.push(kid(&xs, &ys)?);
    }
    Ok(pairwise_sum(&values) / n_subsets as f64)
}

/// Median of all pairwise Euclidean distances within `x ∪ y`.
pub fn median_heuristic_bandwidth(
    x: &[EmbeddingVector],
    y: &[EmbeddingVector],
) -> Result<f64, MetricsError> {
    let all: Vec<&EmbeddingVector> = x.iter().chain(y).collect();
    if all.len() < 2 {
        return Err(MetricsError::SetTooSmall(all.len()));
    }
    check_dims(&all)?;
    let mut distances: Vec<f64> = (0..all.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let all = &all;
            (i + 1..all.len()).map(move |j| {
                all[i]
                    .squared_distance(all[j])
                    .expect("dimensions checked")
                    .sqrt()
            })
        })
        .collect();
    distances.sort_by(f64::total_cmp);
    let n = distances.len();
    let median = if n % 2 == 1 {
        distances[n / 2]
    } else {
        0.5 * (distances[n / 2 - 1] + distances[n / 2])
    };
    if median > 0.0 {
        Ok(median)
    } else {
        Err(MetricsError::InvalidBandwidth(median))
    }
}

fn check_dims(vectors: &[&EmbeddingVector]) -> Result<(), MetricsError> {
    if let Some(first) = vectors.first() {
        for v in vectors {
            if v.dim() != first.dim() {
                return Err(crate::embedding::EmbeddingError::DimensionMismatch(
                    first.dim(),
                    v.dim(),
                )
                .into());
            }
        }
    }
    Ok(())
}

fn unbiased_mmd2<K>(x: &[EmbeddingVector], y: &[EmbeddingVector], kernel: K) -> Result<f64, MetricsError>
where
    K: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    for set in [x, y] {
        if set.len() < 2 {
            return Err(MetricsError::SetTooSmall(set.len()));
        }
    }
    let all: Vec<&EmbeddingVector> = x.iter().chain(y).collect();
    check_dims(&all)?;

    let m = x.len() as f64;
    let n = y.len() as f64;
    let kxx = off_diagonal_sum(x, &kernel);
    let kyy = off_diagonal_sum(y, &kernel);
    let kxy = cross_sum(x, y, &kernel);
    Ok(kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}

fn off_diagonal_sum<K>(set: &[EmbeddingVector], kernel: &K) -> f64
where
    K: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let rows: Vec<f64> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = (0..set.len())
                .filter(|&j| j != i)
                .map(|j| kernel(set[i].as_slice(), set[j].as_slice()))
                .collect();
            pairwise_sum(&row)
        })
        .collect();
    pairwise_sum(&rows)
}

fn cross_sum<K>(x: &[EmbeddingVector], y: &[EmbeddingVector], kernel: &K) -> f64
where
    K: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let rows: Vec<f64> = x
        .par_iter()
        .map(|xi| {
            let row: Vec<f64> = y
                .iter()
                .map(|yj| kernel(xi.as_slice(), yj.as_slice()))
                .collect();
            pairwise_sum(&row)
        })
        .collect();
    pairwise_sum(&rows)
}

/// Fixed-shape tree reduction.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalize(values.to_vec()).unwrap()
    }

    #[test]
    fn constant_sets_give_zero_kid() {
        let v = unit(&[1.0, 2.0, 3.0]);
        let x = vec![v.clone(); 5];
        let y = vec![v; 7];
        assert!(kid(&x, &y).unwrap().abs() < 1e-9);
    }

    #[test]
    fn input_validation() {
        let a = unit(&[1.0, 0.0]);
        assert_eq!(
            kid(&[a.clone()], &[a.clone(), a.clone()]),
            Err(MetricsError::SetTooSmall(1))
        );
        assert_eq!(
            mmd2_rbf(&[a.clone(), a.clone()], &[a.clone(), a.clone()], 0.0),
            Err(MetricsError::InvalidBandwidth(0.0))
        );
        let b = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            kid(&[a.clone(), a.clone()], &[b.clone(), b]),
            Err(MetricsError::Embedding(_))
        ));
        assert!(matches!(
            median_heuristic_bandwidth(&[a.clone()], &[a]),
            Err(MetricsError::InvalidBandwidth(_))
        ));
    }

    #[test]
    fn median_bandwidth_of_an_orthonormal_triple() {
        let x = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        let y = vec![unit(&[0.0, 0.0, 1.0])];
        let bw = median_heuristic_bandwidth(&x, &y).unwrap();
        assert!((bw - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive_sum_on_integers() {
        let values: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&values), 499_500.0);
    }

    #[test]
    fn subset_kid_of_identical_constant_sets_is_zero() {
        let v = unit(&[0.3, 0.4, 0.5]);
        let x = vec![v.clone(); 10];
        let value = kid_subsets(&x, &x, 4, 3, 11).unwrap();
        assert!(value.abs() < 1e-9);
        assert!(matches!(
            kid_subsets(&x, &x, 20, 3, 11),
            Err(MetricsError::SubsetTooLarge { .. })
        ));
    }
}
