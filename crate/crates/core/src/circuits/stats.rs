// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{iou, top_k, Grain};
use crate::attribution::{aggregate, default_min_pairs, AttributionTable};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::stats::{mean, quantile, sd};
use crate::tasks::derive_seed;

/// `|A ∩ B| / |A ∪ B|`, with two empty sets counted as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Project a half-sample reliability to the full sample: `2r / (1 + r)`.
pub fn spearman_brown(r: f64) -> f64 {
    2.0 * r / (1.0 + r)
}

/// Quantile of the IoU between independent uniform size-`k` subsets of two pools,
/// compared after mapping each item through `key`.
pub fn permutation_null_by<T, K, F>(
    pool_a: &[T],
    pool_b: &[T],
    k: usize,
    samples: usize,
    q: f64,
    seed: u64,
    key: F,
) -> Result<f64>
where
    T: Sync,
    K: Ord,
    F: Fn(&T) -> K + Sync,
{
    if k == 0 || pool_a.len() < k || pool_b.len() < k {
        return Err(Error::InsufficientData(format!(
            "pools of size {} and {} cannot supply k = {k}",
            pool_a.len(),
            pool_b.len()
        )));
    }
    if samples < 100 {
        return Err(Error::Config("permutation null needs at least 100 samples".into()));
    }
    let draws: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s));
            let a: BTreeSet<K> = sample(&mut rng, pool_a.len(), k)
                .iter()
                .map(|i| key(&pool_a[i]))
                .collect();
            let b: BTreeSet<K> = sample(&mut rng, pool_b.len(), k)
                .iter()
                .map(|i| key(&pool_b[i]))
                .collect();
            jaccard(&a, &b)
        })
        .collect();
    quantile(&draws, q).ok_or_else(|| Error::Config(format!("quantile {q} outside [0, 1]")))
}

pub fn permutation_null<T: Ord + Clone + Sync>(
    pool_a: &[T],
    pool_b: &[T],
    k: usize,
    samples: usize,
    q: f64,
    seed: u64,
) -> Result<f64> {
    permutation_null_by(pool_a, pool_b, k, samples, q, seed, T::clone)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitHalfOptions {
    pub k: usize,
    pub n_partitions: usize,
    pub seed: u64,
    /// Apply `2r / (1 + r)` to each partition's IoU.
    pub spearman_brown: bool,
    /// Drop edges whose receiver sits below this extended layer.
    pub min_layer: Option<i64>,
}

impl Default for SplitHalfOptions {
    fn default() -> Self {
        Self {
            k: super::DEFAULT_K,
            n_partitions: 10,
            seed: 0,
            spearman_brown: false,
            min_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHalfResult {
    pub per_partition: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Edge IoU of the top-`k` circuits aggregated on two sets of per-pair tables.
pub fn split_half_iou(
    half_a: &[AttributionTable],
    half_b: &[AttributionTable],
    k: usize,
    min_layer: Option<i64>,
    spec: &ModelSpec,
) -> Result<f64> {
    let circuit = |half: &[AttributionTable]| -> Result<super::Circuit> {
        let c = top_k(&aggregate(half, default_min_pairs(half.len()))?, k, spec)?;
        Ok(match min_layer {
            Some(m) => c.with_min_layer(m),
            None => c,
        })
    };
    iou(&circuit(half_a)?, &circuit(half_b)?, Grain::Edge)
}

/// Split-half reliability over `n_partitions` random halvings of the per-pair tables.
pub fn split_half(tables: &[AttributionTable], opts: &SplitHalfOptions, spec: &ModelSpec) -> Result<SplitHalfResult> {
    if tables.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "split-half needs at least 4 pairs, got {}",
            tables.len()
        )));
    }
    if opts.n_partitions == 0 {
        return Err(Error::Config("n_partitions must be >= 1".into()));
    }
    let half = tables.len() / 2;
    let per_partition: Vec<f64> = (0..opts.n_partitions as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, p));
            let idx = sample(&mut rng, tables.len(), tables.len()).into_vec();
            let pick = |ix: &[usize]| -> Vec<AttributionTable> { ix.iter().map(|&i| tables[i].clone()).collect() };
            let r = split_half_iou(
                &pick(&idx[..half]),
                &pick(&idx[half..2 * half]),
                opts.k,
                opts.min_layer,
                spec,
            )?;
            Ok(if opts.spearman_brown { spearman_brown(r) } else { r })
        })
        .collect::<Result<_>>()?;
    Ok(SplitHalfResult {
        mean: mean(&per_partition).unwrap_or(f64::NAN),
        sd: sd(&per_partition).unwrap_or(f64::NAN),
        per_partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_edge_cases() {
        let a: BTreeSet<u32> = [1, 2, 3].into();
        let b: BTreeSet<u32> = [4, 5].into();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &b), 0.0);
        assert_eq!(jaccard::<u32>(&BTreeSet::new(), &BTreeSet::new()), 1.0);
    }

    #[test]
    fn null_of_full_identical_pools_is_one() {
        let pool: Vec<u32> = (0..50).collect();
        assert_eq!(permutation_null(&pool, &pool, 50, 100, 0.99, 3).unwrap(), 1.0);
        assert!(permutation_null(&pool, &pool, 51, 100, 0.99, 3).is_err());
        assert!(permutation_null(&pool, &pool, 5, 99, 0.99, 3).is_err());
    }

    #[test]
    fn null_is_seeded() {
        let pool: Vec<u32> = (0..300).collect();
        let a = permutation_null(&pool, &pool, 30, 200, 0.99, 11).unwrap();
        assert_eq!(a, permutation_null(&pool, &pool, 30, 200, 0.99, 11).unwrap());
    }

    #[test]
    fn spearman_brown_fixed_points() {
        assert_eq!(spearman_brown(1.0), 1.0);
        assert_eq!(spearman_brown(0.0), 0.0);
        assert!((spearman_brown(0.5) - 2.0 / 3.0).abs() < 1e-15);
    }
}
