// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuits as ranked edge subsets, and the set statistics computed over them.

mod export;
mod layers;
mod stats;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionTable, EdgeRef, StructuralEdge};
use crate::error::{Error, Result};
use crate::model::{Component, ModelSpec};

pub use export::{write_csv, write_dot, write_heatmap_csv};
pub use layers::{
    layer_bin, layer_pair_counts, layer_pair_grid, layerwise_iou, random_layerwise_baseline, tf_delta, LayerGrid,
    LayerwiseBand,
};
pub use stats::{
    jaccard, permutation_null, permutation_null_by, spearman_brown, split_half, split_half_iou, SplitHalfOptions,
    SplitHalfResult,
};

/// Default circuit size.
pub const DEFAULT_K: usize = 200;

/// A ranked edge subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    /// Edges by descending `|score|`.
    pub edges: Vec<(EdgeRef, f64)>,
    pub n_layers: usize,
    /// Set when `top_k` was asked for more edges than the table holds.
    pub truncated_from: Option<usize>,
}

/// Granularity of an IoU comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grain {
    Edge,
    Node,
}

impl Circuit {
    pub fn new(edges: Vec<(EdgeRef, f64)>, n_layers: usize) -> Self {
        Self {
            edges,
            n_layers,
            truncated_from: None,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edge_refs(&self) -> impl Iterator<Item = &EdgeRef> {
        self.edges.iter().map(|(e, _)| e)
    }

    /// Edges with positions dropped.
    pub fn structural_set(&self) -> BTreeSet<StructuralEdge> {
        self.edge_refs().map(|e| e.structural()).collect()
    }

    /// Components touched by any edge (`Embed` and `Logits` included).
    pub fn node_set(&self) -> BTreeSet<Component> {
        let mut out = BTreeSet::new();
        for e in self.edge_refs() {
            let (s, r) = e.endpoints();
            out.insert(s);
            out.insert(r);
        }
        out
    }

    /// Edges whose receiver sits at or above `min_layer` on the extended layer axis
    /// (`Embed = -1`, `Logits = n_layers`).
    pub fn with_min_layer(&self, min_layer: i64) -> Circuit {
        Circuit {
            edges: self
                .edges
                .iter()
                .filter(|(e, _)| e.endpoints().1.depth(self.n_layers) >= min_layer)
                .copied()
                .collect(),
            n_layers: self.n_layers,
            truncated_from: self.truncated_from,
        }
    }

    /// Keep the edges whose structural image is (or is not) in `set`.
    fn filter_structural(&self, set: &BTreeSet<StructuralEdge>, keep_members: bool) -> Circuit {
        Circuit::new(
            self.edges
                .iter()
                .filter(|(e, _)| set.contains(&e.structural()) == keep_members)
                .copied()
                .collect(),
            self.n_layers,
        )
    }
}

/// The `k` highest-`|score|` edges, ties broken by `(layer, head, position)`.
pub fn top_k(table: &AttributionTable, k: usize, spec: &ModelSpec) -> Result<Circuit> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let ranked = table.ranked(spec);
    let truncated_from = (k > ranked.len()).then_some(k);
    Ok(Circuit {
        edges: ranked.into_iter().take(k).map(|(e, s)| (e, s.mean)).collect(),
        n_layers: spec.n_layers,
        truncated_from,
    })
}

/// Jaccard IoU on structural edge sets or node sets.
pub fn iou(a: &Circuit, b: &Circuit, grain: Grain) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Undefined("IoU of an empty circuit".into()));
    }
    Ok(match grain {
        Grain::Edge => jaccard(&a.structural_set(), &b.structural_set()),
        Grain::Node => jaccard(&a.node_set(), &b.node_set()),
    })
}

/// Shared trunk and format-specific branches of two matched circuits.
#[derive(Debug, Clone, PartialEq)]
pub struct LeTfSplit {
    /// Edges of `rate` whose structural edge also appears in `class`.
    pub le: Circuit,
    pub tf_rate: Circuit,
    pub tf_class: Circuit,
}

pub fn le_tf_decompose(rate: &Circuit, class: &Circuit) -> LeTfSplit {
    let rs = rate.structural_set();
    let cs = class.structural_set();
    LeTfSplit {
        le: rate.filter_structural(&cs, true),
        tf_rate: rate.filter_structural(&cs, false),
        tf_class: class.filter_structural(&rs, false),
    }
}

/// Depth of a structural edge: the mean extended layer of its endpoints.
pub fn edge_depth(e: &StructuralEdge, n_layers: usize) -> f64 {
    let (s, r) = e.endpoints();
    (s.depth(n_layers) + r.depth(n_layers)) as f64 / 2.0
}

/// Median depth over a set of structural edges.
pub fn median_depth<'a>(edges: impl IntoIterator<Item = &'a StructuralEdge>, n_layers: usize) -> Result<f64> {
    let depths: Vec<f64> = edges.into_iter().map(|e| edge_depth(e, n_layers)).collect();
    crate::stats::median(&depths).ok_or_else(|| Error::InsufficientData("median of an empty edge set".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{edge_universe, Provenance};
    use crate::model::Activation;

    fn spec() -> ModelSpec {
        ModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_seq: 8,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        }
    }

    fn res(s: Component, r: Component, p: i64) -> EdgeRef {
        EdgeRef::Residual {
            sender: s,
            receiver: r,
            position: p,
        }
    }

    fn h(l: usize, h: usize) -> Component {
        Component::Head { layer: l, head: h }
    }

    fn table(scores: &[(EdgeRef, f64)]) -> AttributionTable {
        AttributionTable::from_scores(
            scores.iter().copied(),
            Provenance {
                mode: "gradient".into(),
                task: "t".into(),
                seed: 0,
            },
        )
    }

    #[test]
    fn top_k_basics() {
        let s = spec();
        let u = edge_universe(&s, 3);
        let t = table(
            &u.iter()
                .enumerate()
                .map(|(i, e)| (*e, i as f64 * 0.01))
                .collect::<Vec<_>>(),
        );
        let all = top_k(&t, u.len(), &s).unwrap();
        assert_eq!(all.len(), u.len());
        assert!(all.truncated_from.is_none());
        let one = top_k(&t, 1, &s).unwrap();
        assert_eq!(one.edges[0].0, *u.last().unwrap());
        let over = top_k(&t, u.len() + 5, &s).unwrap();
        assert_eq!(over.len(), u.len());
        assert_eq!(over.truncated_from, Some(u.len() + 5));
        assert!(top_k(&t, 0, &s).is_err());
    }

    #[test]
    fn iou_hand_count() {
        let e = Component::Embed;
        let shared = [res(e, h(0, 0), -1), res(e, h(0, 1), -2)];
        let a: Vec<_> = shared
            .iter()
            .copied()
            .chain([
                res(e, h(1, 0), -1),
                res(e, h(1, 1), -1),
                res(e, Component::Mlp { layer: 0 }, -1),
            ])
            .map(|x| (x, 1.0))
            .collect();
        // Same structural edges at other positions still count as shared.
        let b: Vec<_> = [res(e, h(0, 0), -3), res(e, h(0, 1), -1)]
            .into_iter()
            .chain([
                res(h(0, 0), h(1, 0), -1),
                res(h(0, 1), h(1, 1), -1),
                res(h(0, 0), Component::Logits, -1),
            ])
            .map(|x| (x, 1.0))
            .collect();
        let (a, b) = (Circuit::new(a, 2), Circuit::new(b, 2));
        assert_eq!(iou(&a, &b, Grain::Edge).unwrap(), 0.25);
        assert_eq!(iou(&a, &a, Grain::Edge).unwrap(), 1.0);
        assert_eq!(iou(&a, &a, Grain::Node).unwrap(), 1.0);
        assert!(iou(&a, &Circuit::new(vec![], 2), Grain::Edge).is_err());
    }

    #[test]
    fn le_tf_identities() {
        let s = spec();
        let u = edge_universe(&s, 3);
        let rate = Circuit::new(u.iter().step_by(2).map(|e| (*e, 1.0)).collect(), 2);
        let class = Circuit::new(u.iter().step_by(3).map(|e| (*e, 1.0)).collect(), 2);
        let split = le_tf_decompose(&rate, &class);
        let (le, tr, tc) = (
            split.le.structural_set(),
            split.tf_rate.structural_set(),
            split.tf_class.structural_set(),
        );
        let (rs, cs) = (rate.structural_set(), class.structural_set());
        assert_eq!(le, rs.intersection(&cs).copied().collect());
        assert!(le.is_disjoint(&tr) && le.is_disjoint(&tc) && tr.is_disjoint(&tc));
        assert_eq!(le.union(&tr).copied().collect::<BTreeSet<_>>(), rs);
        let same = le_tf_decompose(&rate, &rate);
        assert_eq!(same.le, rate);
        assert!(same.tf_rate.is_empty() && same.tf_class.is_empty());
    }

    #[test]
    fn depth_uses_extended_axis() {
        let e = StructuralEdge::Residual {
            sender: Component::Embed,
            receiver: Component::Logits,
        };
        assert_eq!(edge_depth(&e, 4), 1.5);
        let c = StructuralEdge::AttnCross { layer: 2, head: 0 };
        assert_eq!(edge_depth(&c, 4), 2.0);
        assert_eq!(median_depth([&e, &c], 4).unwrap(), 1.75);
    }
}
