// SPDX-License-Identifier: MIT OR Apache-2.0

//! Position-aware edge attribution.
//!
//! Residual edges connect a sender's output to a downstream receiver's read point at the
//! same token position. Cross edges carry a head's value vector from a source position
//! into its mixed output at a destination position. Positions are right-aligned.

mod acdc;
mod peap;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{resolve_position, Component, ModelSpec};

pub use acdc::{acdc_prune, AcdcResult};
pub use peap::{
    brute_force_edge_effect, interpolated_prompt, patched_metric, peap_pair_scores, peap_scores_with_polarity,
    prepare_pair, restoration_plan, score_pairs, BackwardMode, GradientSide, PairRun, PeapOptions, ScoredPairs,
};

/// One edge of the attribution graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeRef {
    Residual {
        sender: Component,
        receiver: Component,
        position: i64,
    },
    AttnCross {
        layer: usize,
        head: usize,
        src: i64,
        dst: i64,
    },
}

/// An edge with positions dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StructuralEdge {
    Residual { sender: Component, receiver: Component },
    AttnCross { layer: usize, head: usize },
}

impl EdgeRef {
    pub fn structural(&self) -> StructuralEdge {
        match *self {
            EdgeRef::Residual { sender, receiver, .. } => StructuralEdge::Residual { sender, receiver },
            EdgeRef::AttnCross { layer, head, .. } => StructuralEdge::AttnCross { layer, head },
        }
    }

    /// Sender and receiver components. A cross edge lives inside one head.
    pub fn endpoints(&self) -> (Component, Component) {
        self.structural().endpoints()
    }

    /// Lexicographic `(layer, head, position)` key used to break score ties.
    ///
    /// Layers and heads are taken from the receiver (`Logits` sorts after every layer,
    /// MLPs after every head of their layer); position is the destination position.
    pub fn tie_key(&self, spec: &ModelSpec) -> (usize, usize, i64, usize) {
        let (s, r) = self.endpoints();
        let layer = r.layer().unwrap_or(spec.n_layers);
        let head = r.head().unwrap_or(spec.n_heads);
        let pos = match *self {
            EdgeRef::Residual { position, .. } => position,
            EdgeRef::AttnCross { dst, .. } => dst,
        };
        let sender_rank = match *self {
            EdgeRef::AttnCross { src, .. } => (src - i64::MIN) as usize,
            EdgeRef::Residual { .. } => spec.index_of(s),
        };
        (layer, head, pos, sender_rank)
    }

    /// Check the edge against a model and sequence length.
    pub fn validate(&self, spec: &ModelSpec, len: usize) -> Result<()> {
        match *self {
            EdgeRef::Residual {
                sender,
                receiver,
                position,
            } => {
                spec.check_component(sender)?;
                spec.check_component(receiver)?;
                if !sender.is_sender()
                    || !receiver.is_receiver()
                    || spec.index_of(sender) >= spec.upstream_end(receiver)
                {
                    return Err(Error::UnknownNode(format!("{sender} does not feed {receiver}")));
                }
                resolve_position(position, len)?;
            }
            EdgeRef::AttnCross { layer, head, src, dst } => {
                spec.check_component(Component::Head { layer, head })?;
                let (i, j) = (resolve_position(src, len)?, resolve_position(dst, len)?);
                if i > j {
                    return Err(Error::UnknownNode(format!(
                        "cross edge {src}->{dst} violates the causal mask"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl StructuralEdge {
    pub fn endpoints(&self) -> (Component, Component) {
        match *self {
            StructuralEdge::Residual { sender, receiver } => (sender, receiver),
            StructuralEdge::AttnCross { layer, head } => {
                let h = Component::Head { layer, head };
                (h, h)
            }
        }
    }
}

impl fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeRef::Residual {
                sender,
                receiver,
                position,
            } => write!(f, "{sender}->{receiver}@{position}"),
            EdgeRef::AttnCross { layer, head, src, dst } => write!(f, "L{layer}H{head}[{src}->{dst}]"),
        }
    }
}

impl fmt::Display for StructuralEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructuralEdge::Residual { sender, receiver } => write!(f, "{sender}->{receiver}"),
            StructuralEdge::AttnCross { layer, head } => write!(f, "L{layer}H{head}[v->z]"),
        }
    }
}

/// Every edge for a prompt of length `len`, in canonical order: residual edges by
/// position, receiver, sender; then cross edges by head, destination, source.
pub fn edge_universe(spec: &ModelSpec, len: usize) -> Vec<EdgeRef> {
    let mut out = Vec::with_capacity(universe_size(spec, len));
    for t in 0..len {
        let position = t as i64 - len as i64;
        for receiver in spec.receivers() {
            for s in 0..spec.upstream_end(receiver) {
                out.push(EdgeRef::Residual {
                    sender: spec.component_at(s),
                    receiver,
                    position,
                });
            }
        }
    }
    for layer in 0..spec.n_layers {
        for head in 0..spec.n_heads {
            for j in 0..len {
                for i in 0..=j {
                    out.push(EdgeRef::AttnCross {
                        layer,
                        head,
                        src: i as i64 - len as i64,
                        dst: j as i64 - len as i64,
                    });
                }
            }
        }
    }
    out
}

/// Closed-form universe size:
/// `len * P + L * H * len * (len + 1) / 2` with
/// `P = 2L(H+1) + LH + 1 + (H+1)^2 L(L-1)/2` residual sender/receiver pairs per position.
pub fn universe_size(spec: &ModelSpec, len: usize) -> usize {
    let (l, h) = (spec.n_layers, spec.n_heads);
    let per_position = 2 * l * (h + 1) + l * h + 1 + (h + 1) * (h + 1) * l * l.saturating_sub(1) / 2;
    len * per_position + l * h * len * (len + 1) / 2
}

/// Per-edge statistics across pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub mean: f64,
    /// Population variance across pairs.
    pub var: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: String,
    pub task: String,
    pub seed: u64,
}

/// Edge scores for one pair or aggregated over many.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTable {
    pub edges: BTreeMap<EdgeRef, EdgeStat>,
    pub provenance: Provenance,
}

impl AttributionTable {
    pub fn from_scores(scores: impl IntoIterator<Item = (EdgeRef, f64)>, provenance: Provenance) -> Self {
        Self {
            edges: scores
                .into_iter()
                .map(|(e, s)| {
                    (
                        e,
                        EdgeStat {
                            mean: s,
                            var: 0.0,
                            n: 1,
                        },
                    )
                })
                .collect(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn score(&self, e: &EdgeRef) -> Option<f64> {
        self.edges.get(e).map(|s| s.mean)
    }

    /// Edges by descending `|mean|`, ties broken by [`EdgeRef::tie_key`].
    pub fn ranked(&self, spec: &ModelSpec) -> Vec<(EdgeRef, EdgeStat)> {
        let mut v: Vec<(EdgeRef, EdgeStat)> = self.edges.iter().map(|(e, s)| (*e, *s)).collect();
        v.sort_by(|a, b| {
            b.1.mean
                .abs()
                .total_cmp(&a.1.mean.abs())
                .then_with(|| a.0.tie_key(spec).cmp(&b.0.tie_key(spec)))
        });
        v
    }

    /// CSV with columns `kind,sender,receiver,layer,head,src_pos,dst_pos,mean,var,n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "kind", "sender", "receiver", "layer", "head", "src_pos", "dst_pos", "mean", "var", "n",
        ])?;
        for (e, s) in &self.edges {
            let stats = [s.mean.to_string(), s.var.to_string(), s.n.to_string()];
            let head: [String; 7] = match *e {
                EdgeRef::Residual {
                    sender,
                    receiver,
                    position,
                } => [
                    "residual".into(),
                    sender.to_string(),
                    receiver.to_string(),
                    receiver.layer().map(|l| l.to_string()).unwrap_or_default(),
                    receiver.head().map(|h| h.to_string()).unwrap_or_default(),
                    position.to_string(),
                    position.to_string(),
                ],
                EdgeRef::AttnCross { layer, head, src, dst } => {
                    let c = Component::Head { layer, head }.to_string();
                    [
                        "attn_cross".into(),
                        c.clone(),
                        c,
                        layer.to_string(),
                        head.to_string(),
                        src.to_string(),
                        dst.to_string(),
                    ]
                }
            };
            wr.write_record(head.iter().chain(stats.iter()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, provenance: Provenance) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut edges = BTreeMap::new();
        let bad = |m: &str| Error::Config(format!("attribution csv: {m}"));
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 10 {
                return Err(bad("expected 10 columns"));
            }
            let num = |i: usize| -> Result<i64> { rec[i].parse().map_err(|_| bad("bad integer")) };
            let e = match &rec[0] {
                "residual" => EdgeRef::Residual {
                    sender: Component::from_str(&rec[1])?,
                    receiver: Component::from_str(&rec[2])?,
                    position: num(5)?,
                },
                "attn_cross" => EdgeRef::AttnCross {
                    layer: num(3)? as usize,
                    head: num(4)? as usize,
                    src: num(5)?,
                    dst: num(6)?,
                },
                _ => return Err(bad("unknown edge kind")),
            };
            let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad("bad number")) };
            edges.insert(
                e,
                EdgeStat {
                    mean: f(7)?,
                    var: f(8)?,
                    n: rec[9].parse().map_err(|_| bad("bad count"))?,
                },
            );
        }
        Ok(Self { edges, provenance })
    }
}

/// Default `min_pairs`: a quarter of the pair count, rounded up.
pub fn default_min_pairs(n_pairs: usize) -> usize {
    n_pairs.div_ceil(4).max(1)
}

/// Pool per-pair tables into per-edge means over the pairs where each edge exists,
/// dropping edges seen in fewer than `min_pairs` pairs.
pub fn aggregate(tables: &[AttributionTable], min_pairs: usize) -> Result<AttributionTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InsufficientData("aggregate needs at least one table".into()))?;
    let mut groups: BTreeMap<EdgeRef, Vec<EdgeStat>> = BTreeMap::new();
    for t in tables {
        for (e, s) in &t.edges {
            groups.entry(*e).or_default().push(*s);
        }
    }
    let mut edges = BTreeMap::new();
    for (e, stats) in groups {
        let n: usize = stats.iter().map(|s| s.n).sum();
        if n < min_pairs || n == 0 {
            continue;
        }
        let mut sum = 0.0;
        for s in &stats {
            sum += s.mean * s.n as f64;
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for s in &stats {
            ss += s.n as f64 * (s.var + (s.mean - mean) * (s.mean - mean));
        }
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("aggregated score of {e}")));
        }
        edges.insert(
            e,
            EdgeStat {
                mean,
                var: ss / n as f64,
                n,
            },
        );
    }
    Ok(AttributionTable {
        edges,
        provenance: first.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn spec(l: usize, h: usize) -> ModelSpec {
        ModelSpec {
            n_layers: l,
            n_heads: h,
            d_model: 4 * h,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_seq: 12,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        }
    }

    fn prov() -> Provenance {
        Provenance {
            mode: "gradient".into(),
            task: "t".into(),
            seed: 0,
        }
    }

    #[test]
    fn universe_matches_closed_form_and_is_valid() {
        for (l, h, len) in [(1, 1, 1), (2, 2, 11), (3, 4, 5), (4, 4, 11)] {
            let s = spec(l, h);
            let u = edge_universe(&s, len);
            assert_eq!(u.len(), universe_size(&s, len));
            let set: std::collections::BTreeSet<_> = u.iter().collect();
            assert_eq!(set.len(), u.len());
            for e in &u {
                e.validate(&s, len).unwrap();
            }
        }
        // 2 layers, 2 heads: 26 residual pairs per position.
        assert_eq!(universe_size(&spec(2, 2), 1), 26 + 4);
    }

    #[test]
    fn aggregation_basics() {
        let e = EdgeRef::AttnCross {
            layer: 0,
            head: 0,
            src: -2,
            dst: -1,
        };
        let a = AttributionTable::from_scores([(e, 0.7)], prov());
        assert_eq!(aggregate(&[a.clone()], 1).unwrap(), a);
        let b = AttributionTable::from_scores([(e, -0.7)], prov());
        let agg = aggregate(&[a.clone(), b], 1).unwrap();
        assert_eq!(agg.score(&e), Some(0.0));
        assert_eq!(agg.edges[&e].n, 2);
        assert!(aggregate(&[a.clone()], 2).unwrap().is_empty());
        assert!(aggregate(&[], 1).is_err());
        let same = aggregate(&[agg.clone(), agg.clone()], 1).unwrap();
        assert_eq!(same.edges[&e].mean, agg.edges[&e].mean);
        assert_eq!(same.edges[&e].var, agg.edges[&e].var);
    }

    #[test]
    fn csv_round_trips() {
        let s = spec(2, 2);
        let u = edge_universe(&s, 3);
        let t = AttributionTable::from_scores(u.iter().enumerate().map(|(i, e)| (*e, (i as f64).sin() / 7.0)), prov());
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = AttributionTable::read_csv(&buf[..], prov()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ranking_uses_abs_score_then_tie_key() {
        let s = spec(2, 2);
        let e1 = EdgeRef::Residual {
            sender: Component::Embed,
            receiver: Component::Mlp { layer: 1 },
            position: -1,
        };
        let e2 = EdgeRef::Residual {
            sender: Component::Embed,
            receiver: Component::Mlp { layer: 0 },
            position: -1,
        };
        let e3 = EdgeRef::Residual {
            sender: Component::Embed,
            receiver: Component::Logits,
            position: -2,
        };
        let t = AttributionTable::from_scores([(e1, 0.5), (e2, -0.5), (e3, -0.9)], prov());
        let r: Vec<EdgeRef> = t.ranked(&s).into_iter().map(|x| x.0).collect();
        assert_eq!(r, vec![e3, e2, e1]);
    }
}
