// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{edge_universe, restoration_plan, EdgeRef, PairRun};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::{forward, ModelSpec, Transformer};

/// Outcome of a greedy pruning sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AcdcResult {
    /// Surviving edges in canonical order.
    pub kept: Vec<EdgeRef>,
    /// `|metric change|` observed when each edge was tested.
    pub effects: BTreeMap<EdgeRef, f64>,
    /// Polarity-corrected mean metric with every pruned edge corrupted.
    pub final_metric: f64,
}

/// Reverse-topological sweep key: later receivers first; within a head its cross edges
/// before the residual edges feeding it; then later senders and later positions.
fn sweep_key(spec: &ModelSpec, e: &EdgeRef) -> (std::cmp::Reverse<usize>, u8, std::cmp::Reverse<(usize, i64, i64)>) {
    let (_, r) = e.endpoints();
    let ri = spec.index_of(r);
    match *e {
        EdgeRef::AttnCross { src, dst, .. } => (std::cmp::Reverse(ri), 0, std::cmp::Reverse((0, dst, src))),
        EdgeRef::Residual { sender, position, .. } => (
            std::cmp::Reverse(ri),
            1,
            std::cmp::Reverse((spec.index_of(sender), position, 0)),
        ),
    }
}

fn mean_metric(
    model: &Transformer,
    runs: &[PairRun],
    signs: &[f64],
    corrupted: &[EdgeRef],
    metric: &dyn Metric,
) -> Result<f64> {
    let vals: Vec<Result<f64>> = runs
        .par_iter()
        .zip(signs)
        .map(|(run, m)| {
            let plan = restoration_plan(&run.corrupt_cache, corrupted, false)?;
            let logits = forward(model, &run.clean, &plan)?;
            Ok(m * metric.value(logits.row(logits.rows - 1))?)
        })
        .collect();
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / runs.len() as f64)
}

/// Simplified ACDC: starting from the clean runs, visit edges in reverse topological
/// order and corrupt each one permanently if the polarity-corrected mean metric moves
/// by less than `tau`.
pub fn acdc_prune(model: &Transformer, runs: &[PairRun], tau: f64, metric: &dyn Metric) -> Result<AcdcResult> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
    }
    let first = runs
        .first()
        .ok_or_else(|| Error::InsufficientData("ACDC needs at least one pair".into()))?;
    let len = first.len();
    if runs.iter().any(|r| r.len() != len) {
        return Err(Error::Config("ACDC pairs must share one length".into()));
    }
    let spec = &model.spec;
    let signs: Vec<f64> = runs.iter().map(|r| r.polarity()).collect::<Result<_>>()?;
    let mut order = edge_universe(spec, len);
    order.sort_by_key(|e| sweep_key(spec, e));

    let mut pruned: Vec<EdgeRef> = Vec::new();
    let mut effects = BTreeMap::new();
    let mut current = mean_metric(model, runs, &signs, &pruned, metric)?;
    for e in order {
        pruned.push(e);
        let trial = mean_metric(model, runs, &signs, &pruned, metric)?;
        let delta = (trial - current).abs();
        effects.insert(e, delta);
        if delta < tau {
            current = trial;
        } else {
            pruned.pop();
        }
    }
    let pruned: std::collections::BTreeSet<EdgeRef> = pruned.into_iter().collect();
    Ok(AcdcResult {
        kept: edge_universe(spec, len)
            .into_iter()
            .filter(|e| !pruned.contains(e))
            .collect(),
        effects,
        final_metric: current,
    })
}
