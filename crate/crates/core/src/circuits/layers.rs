// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{jaccard, Circuit};
use crate::attribution::{EdgeRef, StructuralEdge};
use crate::error::{Error, Result};
use crate::stats::{mean, quantile};
use crate::tasks::derive_seed;

/// Relative-depth bin of an extended layer (`-1..=n_layers`).
pub fn layer_bin(layer: i64, n_layers: usize, n_bins: usize) -> usize {
    let rel = (layer + 1) as f64 / (n_layers + 1) as f64;
    ((rel * n_bins as f64).floor() as usize).min(n_bins - 1)
}

fn endpoint_layers(e: &StructuralEdge, n_layers: usize) -> (i64, i64) {
    let (s, r) = e.endpoints();
    (s.depth(n_layers), r.depth(n_layers))
}

fn bucket(set: &BTreeSet<StructuralEdge>, n_layers: usize, n_bins: usize, bin: usize) -> BTreeSet<StructuralEdge> {
    set.iter()
        .filter(|e| {
            let (s, r) = endpoint_layers(e, n_layers);
            layer_bin(s, n_layers, n_bins) == bin || layer_bin(r, n_layers, n_bins) == bin
        })
        .copied()
        .collect()
}

fn binned_iou(
    a: &BTreeSet<StructuralEdge>,
    b: &BTreeSet<StructuralEdge>,
    n_layers: usize,
    n_bins: usize,
) -> Vec<Option<f64>> {
    (0..n_bins)
        .map(|bin| {
            let (ba, bb) = (bucket(a, n_layers, n_bins, bin), bucket(b, n_layers, n_bins, bin));
            (!(ba.is_empty() && bb.is_empty())).then(|| jaccard(&ba, &bb))
        })
        .collect()
}

/// Per-bin edge IoU, where an edge belongs to the bins of both its endpoints.
/// Bins where both circuits are empty are `None`.
pub fn layerwise_iou(a: &Circuit, b: &Circuit, n_bins: usize) -> Result<Vec<Option<f64>>> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be >= 1".into()));
    }
    if a.n_layers != b.n_layers {
        return Err(Error::Config("circuits come from different models".into()));
    }
    Ok(binned_iou(&a.structural_set(), &b.structural_set(), a.n_layers, n_bins))
}

/// Mean and 95% interval of per-bin IoU between random size-`k` subsets of two pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseBand {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn random_layerwise_baseline(
    pool_a: &[EdgeRef],
    pool_b: &[EdgeRef],
    k: usize,
    n_layers: usize,
    n_bins: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<Option<LayerwiseBand>>> {
    if k == 0 || pool_a.len() < k || pool_b.len() < k || n_bins == 0 || trials == 0 {
        return Err(Error::InsufficientData(
            "random layer baseline needs k <= pool sizes".into(),
        ));
    }
    let runs: Vec<Vec<Option<f64>>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t));
            let a = sample(&mut rng, pool_a.len(), k)
                .iter()
                .map(|i| pool_a[i].structural())
                .collect();
            let b = sample(&mut rng, pool_b.len(), k)
                .iter()
                .map(|i| pool_b[i].structural())
                .collect();
            binned_iou(&a, &b, n_layers, n_bins)
        })
        .collect();
    Ok((0..n_bins)
        .map(|bin| {
            let xs: Vec<f64> = runs.iter().filter_map(|r| r[bin]).collect();
            Some(LayerwiseBand {
                mean: mean(&xs)?,
                lo: quantile(&xs, 0.025)?,
                hi: quantile(&xs, 0.975)?,
            })
        })
        .collect())
}

/// Square grid over the extended layer axis: row = sender layer, column = receiver layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub n_layers: usize,
    /// Row-major, `(n_layers + 2)^2` cells; `None` where the cell is undefined.
    pub cells: Vec<Option<f64>>,
}

impl LayerGrid {
    pub fn side(&self) -> usize {
        self.n_layers + 2
    }

    pub fn get(&self, sender_layer: i64, receiver_layer: i64) -> Option<f64> {
        let n = self.side() as i64;
        let (i, j) = (sender_layer + 1, receiver_layer + 1);
        if !(0..n).contains(&i) || !(0..n).contains(&j) {
            return None;
        }
        self.cells[(i * n + j) as usize]
    }

    /// `(sender_layer, receiver_layer, value)` for every defined cell.
    pub fn defined(&self) -> Vec<(i64, i64, f64)> {
        let n = self.side();
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(idx, v)| v.map(|v| ((idx / n) as i64 - 1, (idx % n) as i64 - 1, v)))
            .collect()
    }
}

fn cell_of(e: &StructuralEdge, n_layers: usize) -> usize {
    let (s, r) = endpoint_layers(e, n_layers);
    ((s + 1) as usize) * (n_layers + 2) + (r + 1) as usize
}

/// Positioned-edge count per (sender layer, receiver layer) cell. Sums to `c.len()`.
pub fn layer_pair_counts(c: &Circuit) -> Vec<usize> {
    let mut out = vec![0; (c.n_layers + 2) * (c.n_layers + 2)];
    for e in c.edge_refs() {
        out[cell_of(&e.structural(), c.n_layers)] += 1;
    }
    out
}

/// Per-cell structural edge IoU.
pub fn layer_pair_grid(a: &Circuit, b: &Circuit) -> Result<LayerGrid> {
    if a.n_layers != b.n_layers {
        return Err(Error::Config("circuits come from different models".into()));
    }
    let n_layers = a.n_layers;
    let cells_n = (n_layers + 2) * (n_layers + 2);
    let mut ca = vec![BTreeSet::new(); cells_n];
    let mut cb = vec![BTreeSet::new(); cells_n];
    for e in a.structural_set() {
        ca[cell_of(&e, n_layers)].insert(e);
    }
    for e in b.structural_set() {
        cb[cell_of(&e, n_layers)].insert(e);
    }
    let cells = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| (!(x.is_empty() && y.is_empty())).then(|| jaccard(x, y)))
        .collect();
    Ok(LayerGrid { n_layers, cells })
}

/// `mean(within-format cell) - cross-format cell`, defined where the cross cell and at
/// least one within cell are.
pub fn tf_delta(within: &[LayerGrid], cross: &LayerGrid) -> Result<LayerGrid> {
    if within.is_empty() {
        return Err(Error::InsufficientData(
            "tf_delta needs at least one within-format grid".into(),
        ));
    }
    if within.iter().any(|g| g.n_layers != cross.n_layers) {
        return Err(Error::Config("grids come from different models".into()));
    }
    let cells = (0..cross.cells.len())
        .map(|i| {
            let xs: Vec<f64> = within.iter().filter_map(|g| g.cells[i]).collect();
            Some(mean(&xs)? - cross.cells[i]?)
        })
        .collect();
    Ok(LayerGrid {
        n_layers: cross.n_layers,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Component;

    fn c(edges: &[EdgeRef]) -> Circuit {
        Circuit::new(edges.iter().map(|e| (*e, 1.0)).collect(), 2)
    }

    fn edges() -> [EdgeRef; 3] {
        [
            EdgeRef::Residual {
                sender: Component::Embed,
                receiver: Component::Head { layer: 1, head: 0 },
                position: -1,
            },
            EdgeRef::Residual {
                sender: Component::Mlp { layer: 0 },
                receiver: Component::Logits,
                position: -2,
            },
            EdgeRef::AttnCross {
                layer: 1,
                head: 1,
                src: -3,
                dst: -1,
            },
        ]
    }

    #[test]
    fn bins_cover_the_extended_axis() {
        let bins: Vec<usize> = (-1..=4).map(|l| layer_bin(l, 4, 6)).collect();
        assert_eq!(bins, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(layer_bin(4, 4, 1), 0);
    }

    #[test]
    fn hand_built_grid() {
        let [e1, e2, e3] = edges();
        let a = c(&[e1, e2, e3]);
        let b = c(&[e1, e3]);
        let g = layer_pair_grid(&a, &b).unwrap();
        assert_eq!(g.get(-1, 1), Some(1.0));
        assert_eq!(g.get(0, 2), Some(0.0));
        assert_eq!(g.get(1, 1), Some(1.0));
        assert_eq!(g.defined().len(), 3);
        let counts = layer_pair_counts(&a);
        assert_eq!(counts.iter().sum::<usize>(), 3);
        assert_eq!(counts[2], 1);
    }

    #[test]
    fn identical_circuits_give_unit_bins() {
        let [e1, e2, e3] = edges();
        let a = c(&[e1, e2, e3]);
        let bins = layerwise_iou(&a, &a, 4).unwrap();
        assert!(bins.iter().flatten().all(|v| *v == 1.0));
        assert!(bins.iter().any(|v| v.is_none()) || bins.len() == 4);
        let g = layer_pair_grid(&a, &a).unwrap();
        let d = tf_delta(&[g.clone(), g.clone()], &g).unwrap();
        assert!(d.defined().iter().all(|x| x.2 == 0.0));
        assert_eq!(d.defined().len(), g.defined().len());
    }

    #[test]
    fn endpoints_count_in_both_bins() {
        let [e1, ..] = edges();
        let bins = layerwise_iou(&c(&[e1]), &c(&[e1]), 4).unwrap();
        // Embed (-1) lands in bin 0, layer 1 in bin 2.
        assert_eq!(bins, vec![Some(1.0), None, Some(1.0), None]);
    }
}
