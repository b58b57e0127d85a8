// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{edge_universe, patched_metric, AttributionTable, EdgeRef, PairRun};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::{ModelSpec, Transformer};
use crate::stats::{bootstrap_mean_ci, mean, median};
use crate::tasks::derive_seed;

/// Bootstrap resamples for the confidence interval of the mean.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithPoint {
    pub k: usize,
    pub median: f64,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub used: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub points: Vec<FaithPoint>,
    pub min_gap: f64,
    /// Per-pair recovery at each k, `[k index][used pair]`.
    pub per_pair: Vec<Vec<f64>>,
}

impl FaithfulnessCurve {
    pub fn k_grid(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.k).collect()
    }

    pub fn medians(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.median).collect()
    }
}

fn check_grid(k_grid: &[usize]) -> Result<()> {
    if k_grid.is_empty() || k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("k grid must be nonempty and strictly increasing".into()));
    }
    Ok(())
}

/// EV of the corrupted run with `edges` restored to clean. Edges whose positions do not
/// exist in this pair are ignored.
fn restored_ev(model: &Transformer, run: &PairRun, edges: &[EdgeRef], metric: &dyn Metric) -> Result<f64> {
    let usable: Vec<EdgeRef> = edges
        .iter()
        .copied()
        .filter(|e| e.validate(&model.spec, run.len()).is_ok())
        .collect();
    if usable.is_empty() {
        return Ok(run.ev_corrupt);
    }
    patched_metric(model, &run.corrupt, &run.clean_cache, &usable, metric, false)
}

/// `(EV(restored) - EV_corr) / (EV_clean - EV_corr)`.
fn recovery(model: &Transformer, run: &PairRun, edges: &[EdgeRef], metric: &dyn Metric) -> Result<f64> {
    Ok((restored_ev(model, run, edges, metric)? - run.ev_corrupt) / run.gap())
}

fn curve_from(
    model: &Transformer,
    runs: &[PairRun],
    k_grid: &[usize],
    min_gap: f64,
    metric: &dyn Metric,
    seed: u64,
    edges_for: impl Fn(usize, usize) -> Vec<EdgeRef> + Sync,
) -> Result<FaithfulnessCurve> {
    check_grid(k_grid)?;
    if !(min_gap > 0.0) {
        return Err(Error::Config("min_gap must be > 0".into()));
    }
    let used: Vec<usize> = (0..runs.len())
        .filter(|&i| runs[i].check_gap(min_gap).is_ok())
        .collect();
    if used.is_empty() {
        return Err(Error::InsufficientData(format!(
            "all {} pairs fall below min_gap {min_gap}",
            runs.len()
        )));
    }
    let skipped = runs.len() - used.len();
    let mut points = Vec::with_capacity(k_grid.len());
    let mut per_pair = Vec::with_capacity(k_grid.len());
    for (ki, &k) in k_grid.iter().enumerate() {
        let vals: Vec<f64> = used
            .par_iter()
            .map(|&i| recovery(model, &runs[i], &edges_for(i, k), metric))
            .collect::<Result<_>>()?;
        let (ci_lo, ci_hi) =
            bootstrap_mean_ci(&vals, BOOTSTRAP_RESAMPLES, 0.95, derive_seed(seed, ki as u64)).expect("nonempty values");
        points.push(FaithPoint {
            k,
            median: median(&vals).expect("nonempty values"),
            mean: mean(&vals).expect("nonempty values"),
            ci_lo,
            ci_hi,
            used: vals.len(),
            skipped,
        });
        per_pair.push(vals);
    }
    Ok(FaithfulnessCurve {
        points,
        min_gap,
        per_pair,
    })
}

fn ranked_edges(table: &AttributionTable, spec: &ModelSpec) -> Vec<EdgeRef> {
    table.ranked(spec).into_iter().map(|(e, _)| e).collect()
}

/// Median per-pair recovery when the table's top-`k` edges are restored to clean values
/// in each corrupted run. Pairs with `|EV gap| < min_gap` are skipped.
pub fn faithfulness_curve(
    model: &Transformer,
    runs: &[PairRun],
    table: &AttributionTable,
    k_grid: &[usize],
    min_gap: f64,
    metric: &dyn Metric,
    seed: u64,
) -> Result<FaithfulnessCurve> {
    let ranked = ranked_edges(table, &model.spec);
    curve_from(model, runs, k_grid, min_gap, metric, seed, |_, k| {
        ranked[..k.min(ranked.len())].to_vec()
    })
}

/// Same curve with uniformly random size-`k` edge subsets of each pair's universe.
pub fn random_faithfulness_curve(
    model: &Transformer,
    runs: &[PairRun],
    k_grid: &[usize],
    min_gap: f64,
    metric: &dyn Metric,
    seed: u64,
) -> Result<FaithfulnessCurve> {
    curve_from(model, runs, k_grid, min_gap, metric, seed, |i, k| {
        let u = edge_universe(&model.spec, runs[i].len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (i as u64) << 32 | k as u64));
        sample(&mut rng, u.len(), k.min(u.len())).iter().map(|j| u[j]).collect()
    })
}

/// Pooled ratio `sum_i m_i (EV_i(k) - EV_corr_i) / sum_i |EV_clean_i - EV_corr_i|`, no gap filter.
pub fn pooled_faithfulness(
    model: &Transformer,
    runs: &[PairRun],
    table: &AttributionTable,
    k_grid: &[usize],
    metric: &dyn Metric,
) -> Result<Vec<(usize, f64)>> {
    check_grid(k_grid)?;
    let denom: f64 = runs.iter().map(|r| r.gap().abs()).sum();
    if denom == 0.0 {
        return Err(Error::Undefined("pooled faithfulness with zero total gap".into()));
    }
    let ranked = ranked_edges(table, &model.spec);
    k_grid
        .iter()
        .map(|&k| {
            let edges = &ranked[..k.min(ranked.len())];
            let terms: Vec<f64> = runs
                .par_iter()
                .map(|r| -> Result<f64> {
                    if r.gap() == 0.0 {
                        return Ok(0.0);
                    }
                    Ok(r.gap().signum() * (restored_ev(model, r, edges, metric)? - r.ev_corrupt))
                })
                .collect::<Result<_>>()?;
            Ok((k, terms.iter().sum::<f64>() / denom))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{aggregate, prepare_pair, score_pairs, PeapOptions, Provenance};
    use crate::metrics::RatingScale;
    use crate::model::{Activation, Prompt, Weights};

    fn setup() -> (Transformer, Vec<PairRun>, AttributionTable, RatingScale) {
        let spec = ModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 12,
            max_seq: 6,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        };
        let m = Weights::init_with_std(&spec, 9, 0.5).unwrap().compile();
        let scale = RatingScale::new(vec![7, 8, 9, 10, 11]).unwrap();
        let prompts: Vec<(Prompt, Prompt)> = (0..6u32)
            .map(|i| (vec![0, 1 + i % 5, 2, 3].into(), vec![0, 6 - i % 5, 5, 3].into()))
            .collect();
        let runs: Vec<PairRun> = prompts
            .iter()
            .map(|(c, k)| prepare_pair(&m, c, k, &scale).unwrap())
            .collect();
        let opts = PeapOptions {
            min_gap: 1e-6,
            ..Default::default()
        };
        let prov = Provenance {
            mode: "gradient".into(),
            task: "t".into(),
            seed: 0,
        };
        let tables = score_pairs(&m, &prompts, &scale, &opts, &prov).unwrap().tables;
        let table = aggregate(&tables, 1).unwrap();
        (m, runs, table, scale)
    }

    #[test]
    fn endpoints_are_exact() {
        let (m, runs, table, scale) = setup();
        let n = table.len();
        let c = faithfulness_curve(&m, &runs, &table, &[0, 5, n], 1e-6, &scale, 1).unwrap();
        assert_eq!(c.points[0].median, 0.0);
        assert!(c.per_pair[0].iter().all(|v| *v == 0.0));
        assert!(c.per_pair[2].iter().all(|v| *v == 1.0));
        for p in &c.points {
            assert_eq!(p.used + p.skipped, runs.len());
        }
        let pooled = pooled_faithfulness(&m, &runs, &table, &[0, n], &scale).unwrap();
        assert_eq!(pooled[0].1, 0.0);
        assert_eq!(pooled[1].1, 1.0);
        let r = random_faithfulness_curve(&m, &runs, &[0, n], 1e-6, &scale, 1).unwrap();
        assert_eq!(r.medians(), vec![0.0, 1.0]);
    }

    #[test]
    fn bad_inputs() {
        let (m, runs, table, scale) = setup();
        assert!(faithfulness_curve(&m, &runs, &table, &[3, 3], 0.05, &scale, 1).is_err());
        assert!(faithfulness_curve(&m, &runs, &table, &[1], 0.0, &scale, 1).is_err());
        assert!(matches!(
            faithfulness_curve(&m, &runs, &table, &[1], 1e9, &scale, 1),
            Err(Error::InsufficientData(_))
        ));
    }
}
