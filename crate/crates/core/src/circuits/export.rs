// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use super::Circuit;
use crate::attribution::EdgeRef;
use crate::error::Result;
use crate::model::{Component, NodeRef};

fn node_of(e: &EdgeRef) -> (NodeRef, NodeRef) {
    match *e {
        EdgeRef::Residual {
            sender,
            receiver,
            position,
        } => (NodeRef::new(sender, position), NodeRef::new(receiver, position)),
        EdgeRef::AttnCross { layer, head, src, dst } => {
            let h = Component::Head { layer, head };
            (NodeRef::new(h, src), NodeRef::new(h, dst))
        }
    }
}

/// Graphviz digraph: one node per (component, position) with `layer` and `position`
/// attributes, one edge per circuit edge.
pub fn write_dot<W: Write>(c: &Circuit, mut w: W) -> Result<()> {
    let mut nodes = BTreeSet::new();
    for e in c.edge_refs() {
        let (a, b) = node_of(e);
        nodes.insert(a);
        nodes.insert(b);
    }
    writeln!(w, "digraph circuit {{")?;
    writeln!(w, "  rankdir=BT;")?;
    for n in &nodes {
        writeln!(
            w,
            "  \"{n}\" [layer={}, position={}];",
            n.component.depth(c.n_layers),
            n.position
        )?;
    }
    for (e, s) in &c.edges {
        let (a, b) = node_of(e);
        let kind = match e {
            EdgeRef::Residual { .. } => "residual",
            EdgeRef::AttnCross { .. } => "attn_cross",
        };
        writeln!(w, "  \"{a}\" -> \"{b}\" [kind={kind}, score={s}];")?;
    }
    writeln!(w, "}}")?;
    Ok(())
}

/// Ranked edge list: `rank,kind,sender,receiver,layer,head,src_pos,dst_pos,score`.
pub fn write_csv<W: Write>(c: &Circuit, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "rank", "kind", "sender", "receiver", "layer", "head", "src_pos", "dst_pos", "score",
    ])?;
    for (rank, (e, s)) in c.edges.iter().enumerate() {
        let (a, b) = node_of(e);
        let kind = match e {
            EdgeRef::Residual { .. } => "residual",
            EdgeRef::AttnCross { .. } => "attn_cross",
        };
        wr.write_record([
            rank.to_string(),
            kind.to_string(),
            a.component.to_string(),
            b.component.to_string(),
            b.component.layer().map(|l| l.to_string()).unwrap_or_default(),
            b.component.head().map(|h| h.to_string()).unwrap_or_default(),
            a.position.to_string(),
            b.position.to_string(),
            s.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Dense source-by-destination score matrix for every head with a cross edge in the
/// circuit. Columns: `component,src` then one column per destination `-len..=-1`.
pub fn write_heatmap_csv<W: Write>(c: &Circuit, len: usize, w: W) -> Result<()> {
    let mut per_head: BTreeMap<(usize, usize), BTreeMap<(i64, i64), f64>> = BTreeMap::new();
    for (e, s) in &c.edges {
        if let EdgeRef::AttnCross { layer, head, src, dst } = *e {
            per_head.entry((layer, head)).or_default().insert((src, dst), *s);
        }
    }
    let positions: Vec<i64> = (-(len as i64)..0).collect();
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["component".to_string(), "src".to_string()];
    header.extend(positions.iter().map(|p| format!("dst{p}")));
    wr.write_record(&header)?;
    for ((layer, head), cells) in per_head {
        let name = Component::Head { layer, head }.to_string();
        for &src in &positions {
            let mut row = vec![name.clone(), src.to_string()];
            row.extend(
                positions
                    .iter()
                    .map(|&dst| cells.get(&(src, dst)).copied().unwrap_or(0.0).to_string()),
            );
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}
