// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{restoration_plan, EdgeRef, PairRun};
use crate::circuits::Circuit;
use crate::error::{Error, Result};
use crate::metrics::{argmax_token, Metric};
use crate::model::{forward, Component, InterventionPlan, Transformer};
use crate::stats::median;
use crate::tasks::{Example, TaskKind, TaskSpec};

/// A named evaluation set scored by restricted argmax over its answer tokens.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub name: String,
    pub examples: Vec<Example>,
    pub task: TaskSpec,
}

fn candidates(task: &TaskSpec, kind: TaskKind) -> Vec<u32> {
    match kind {
        TaskKind::Rating => task.rating_scale().tokens,
        _ => vec![task.yes(), task.no()],
    }
}

/// Accuracy of the restricted argmax under an intervention plan.
pub fn accuracy_under_plan(
    model: &Transformer,
    examples: &[Example],
    task: &TaskSpec,
    plan: &InterventionPlan,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("empty evaluation suite".into()));
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|e| {
            let logits = forward(model, &e.tokens.clone().into(), plan)?;
            Ok(argmax_token(logits.row(logits.rows - 1), &candidates(task, e.task)) == e.target)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteDelta {
    pub suite: String,
    pub n: usize,
    pub before: f64,
    pub after: f64,
}

impl SuiteDelta {
    /// `after - before`, in accuracy units.
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

/// Senders of a circuit's edges, excluding the embeddings.
pub fn circuit_senders(c: &Circuit) -> Vec<Component> {
    let set: BTreeSet<Component> = c
        .edge_refs()
        .map(|e| e.endpoints().0)
        .filter(|s| *s != Component::Embed)
        .collect();
    set.into_iter().collect()
}

/// Heads and MLPs touched by a circuit's edges.
pub fn circuit_internal_nodes(c: &Circuit) -> Vec<Component> {
    c.node_set()
        .into_iter()
        .filter(|n| !matches!(n, Component::Embed | Component::Logits))
        .collect()
}

/// Accuracy on each suite before and after clamping `components` to zero everywhere.
pub fn zero_ablate_eval(
    model: &Transformer,
    components: &[Component],
    suites: &[EvalSuite],
) -> Result<Vec<SuiteDelta>> {
    let mut plan = InterventionPlan::new();
    for c in components {
        plan = plan.zero(*c);
    }
    suites
        .iter()
        .map(|s| {
            Ok(SuiteDelta {
                suite: s.name.clone(),
                n: s.examples.len(),
                before: accuracy_under_plan(model, &s.examples, &s.task, &InterventionPlan::new())?,
                after: accuracy_under_plan(model, &s.examples, &s.task, &plan)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStep {
    pub edges: usize,
    pub mean_ev: f64,
    pub accuracy: f64,
}

/// Replace the first `n` circuit edges (by rank) with corrupted values in each clean
/// run, for every `n` in `counts`, and record mean EV and restricted-argmax accuracy
/// against the clean targets.
pub fn iterative_ablation(
    model: &Transformer,
    runs: &[PairRun],
    targets: &[u32],
    candidates: &[u32],
    circuit: &Circuit,
    counts: &[usize],
    metric: &dyn Metric,
) -> Result<Vec<AblationStep>> {
    if runs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: runs.len(),
            got: targets.len(),
        });
    }
    if runs.is_empty() {
        return Err(Error::InsufficientData("no pairs to ablate".into()));
    }
    let ranked: Vec<EdgeRef> = circuit.edge_refs().copied().collect();
    counts
        .iter()
        .map(|&n| {
            let edges = &ranked[..n.min(ranked.len())];
            let per: Vec<(f64, bool)> = runs
                .par_iter()
                .zip(targets)
                .map(|(run, &target)| {
                    let usable: Vec<EdgeRef> = edges
                        .iter()
                        .copied()
                        .filter(|e| e.validate(&model.spec, run.len()).is_ok())
                        .collect();
                    let plan = restoration_plan(&run.corrupt_cache, &usable, false)?;
                    let logits = forward(model, &run.clean, &plan)?;
                    let row = logits.row(logits.rows - 1);
                    Ok((metric.value(row)?, argmax_token(row, candidates) == target))
                })
                .collect::<Result<_>>()?;
            Ok(AblationStep {
                edges: n.min(ranked.len()),
                mean_ev: per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64,
                accuracy: per.iter().filter(|p| p.1).count() as f64 / per.len() as f64,
            })
        })
        .collect()
}

/// Largest single-step accuracy drop along a trajectory and the median step drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTransition {
    pub max_drop: f64,
    pub median_drop: f64,
    /// Edge count after the largest drop.
    pub at_edges: usize,
}

pub fn phase_transition(traj: &[AblationStep]) -> Option<PhaseTransition> {
    let drops: Vec<(f64, usize)> = traj
        .windows(2)
        .map(|w| (w[0].accuracy - w[1].accuracy, w[1].edges))
        .collect();
    let (max_drop, at_edges) = drops.iter().copied().max_by(|a, b| a.0.total_cmp(&b.0))?;
    Some(PhaseTransition {
        max_drop,
        median_drop: median(&drops.iter().map(|d| d.0).collect::<Vec<_>>())?,
        at_edges,
    })
}
