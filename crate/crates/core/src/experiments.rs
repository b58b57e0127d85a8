// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end experiment pipelines built from the library modules.
//!
//! The command-line tool and the acceptance suite both drive these functions, so a
//! number printed by one is the number the other writes to disk.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    aggregate, default_min_pairs, prepare_pair, score_pairs, AttributionTable, EdgeRef, PairRun, PeapOptions,
    Provenance,
};
use crate::circuits::{iou, le_tf_decompose, median_depth, permutation_null_by, top_k, Circuit, Grain};
use crate::error::{Error, Result};
use crate::interventions::{
    circuit_internal_nodes, circuit_senders, fti, random_rotation_control, steer, steering_vectors, zero_ablate_eval,
    EvalSuite, FtiReport, SteeringBundle, SuiteDelta,
};
use crate::metrics::spearman_rho;
use crate::model::{Component, ModelSpec, NodeRef, Prompt, Transformer};
use crate::stats::mean;
use crate::tasks::{
    build_minimal_pairs, derive_seed, generate_task, reformat, Example, Format, KnowledgeProbe, MinimalPair, TaskKind,
    TaskSpec,
};

/// Dataset sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training examples per task (rating, classification, knowledge).
    pub n_train: usize,
    /// Held-out examples per judgment format.
    pub n_eval: usize,
    /// Minimal pairs kept for tracing.
    pub n_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 3000,
            n_eval: 500,
            n_pairs: 100,
        }
    }
}

/// Training and evaluation data for the three jointly trained tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskSpec,
    pub probe: KnowledgeProbe,
    pub train: Vec<Example>,
    pub eval_rating: Vec<Example>,
    pub eval_classification: Vec<Example>,
    pub eval_knowledge: Vec<Example>,
    /// Rating-format minimal pairs built from `eval_rating`.
    pub pairs: Vec<MinimalPair>,
}

/// Seed streams derived from a dataset master seed.
mod stream {
    pub const TRAIN_RATING: u64 = 1;
    pub const TRAIN_CLASS: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const TRAIN_KNOWLEDGE: u64 = 4;
    pub const EVAL_RATING: u64 = 5;
    pub const EVAL_CLASS: u64 = 6;
    pub const EVAL_KNOWLEDGE: u64 = 7;
    pub const PAIRS: u64 = 8;
}

pub fn generate_dataset(task: &TaskSpec, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let rate = task.with_format(Format::Rating);
    let class = task.with_format(Format::Classification);
    let probe = KnowledgeProbe::new(task, derive_seed(seed, stream::PROBE))?;
    let mut train = generate_task(&rate, derive_seed(seed, stream::TRAIN_RATING), cfg.n_train)?;
    train.extend(generate_task(
        &class,
        derive_seed(seed, stream::TRAIN_CLASS),
        cfg.n_train,
    )?);
    train.extend(probe.generate(derive_seed(seed, stream::TRAIN_KNOWLEDGE), cfg.n_train));
    let eval_rating = generate_task(&rate, derive_seed(seed, stream::EVAL_RATING), cfg.n_eval)?;
    let eval_classification = generate_task(&class, derive_seed(seed, stream::EVAL_CLASS), cfg.n_eval)?;
    let eval_knowledge = probe.evaluation_set(derive_seed(seed, stream::EVAL_KNOWLEDGE));
    let mut pairs = build_minimal_pairs(&eval_rating, derive_seed(seed, stream::PAIRS))?;
    pairs.truncate(cfg.n_pairs);
    Ok(Dataset {
        task: rate,
        probe,
        train,
        eval_rating,
        eval_classification,
        eval_knowledge,
        pairs,
    })
}

impl Dataset {
    /// The pair set in `format`; classification pairs are the rating pairs with the
    /// instruction suffix swapped, so both formats see the same content.
    pub fn pairs_for(&self, format: Format) -> Result<Vec<MinimalPair>> {
        self.pairs.iter().map(|p| reformat(p, format, &self.task)).collect()
    }

    pub fn suites(&self) -> Vec<EvalSuite> {
        [
            ("rating", &self.eval_rating),
            ("classification", &self.eval_classification),
            ("knowledge", &self.eval_knowledge),
        ]
        .into_iter()
        .map(|(name, ex)| EvalSuite {
            name: name.into(),
            examples: ex.clone(),
            task: self.task.clone(),
        })
        .collect()
    }

    pub fn eval_all(&self) -> Vec<Example> {
        let mut v = self.eval_rating.clone();
        v.extend(self.eval_classification.iter().cloned());
        v.extend(self.eval_knowledge.iter().cloned());
        v
    }
}

pub fn format_name(f: Format) -> &'static str {
    match f {
        Format::Rating => "rating",
        Format::Classification => "classification",
    }
}

pub fn parse_format(s: &str) -> Result<Format> {
    match s {
        "rating" => Ok(Format::Rating),
        "classification" => Ok(Format::Classification),
        _ => Err(Error::Config(format!(
            "unknown format `{s}` (expected rating or classification)"
        ))),
    }
}

/// Clean and corrupted forward passes for every pair.
pub fn pair_runs(model: &Transformer, task: &TaskSpec, pairs: &[MinimalPair]) -> Result<Vec<PairRun>> {
    pairs
        .par_iter()
        .map(|p| {
            let metric = task.metric(p.format);
            prepare_pair(model, &p.clean.clone().into(), &p.corrupt.clone().into(), &metric)
        })
        .collect()
}

/// Per-pair attribution tables and their aggregate for one format.
#[derive(Debug, Clone)]
pub struct Trace {
    pub format: Format,
    pub tables: Vec<AttributionTable>,
    /// Pair indices dropped by the gap filter.
    pub skipped: Vec<usize>,
    pub aggregate: AttributionTable,
}

pub fn trace(
    model: &Transformer,
    task: &TaskSpec,
    pairs: &[MinimalPair],
    format: Format,
    opts: &PeapOptions,
) -> Result<Trace> {
    let metric = task.metric(format);
    let prompts: Vec<(Prompt, Prompt)> = pairs
        .iter()
        .map(|p| {
            let p = reformat(p, format, task)?;
            Ok((p.clean.into(), p.corrupt.into()))
        })
        .collect::<Result<_>>()?;
    let provenance = Provenance {
        mode: opts.mode.name().into(),
        task: format_name(format).into(),
        seed: 0,
    };
    let scored = score_pairs(model, &prompts, &metric, opts, &provenance)?;
    let min_pairs = default_min_pairs(scored.tables.len());
    let aggregate = aggregate(&scored.tables, min_pairs)?;
    Ok(Trace {
        format,
        tables: scored.tables,
        skipped: scored.skipped,
        aggregate,
    })
}

/// 99th percentile of structural IoU between random size-`k` subsets of `pool`.
pub fn structural_null_p99(pool: &[EdgeRef], k: usize, samples: usize, seed: u64) -> Result<f64> {
    permutation_null_by(pool, pool, k, samples, 0.99, seed, |e| e.structural())
}

/// Cross-format overlap at size `k`.
#[derive(Debug, Clone)]
pub struct OverlapReport {
    pub rate: Circuit,
    pub class: Circuit,
    pub le: Circuit,
    pub tf_rate: Circuit,
    pub tf_class: Circuit,
    pub edge_iou: f64,
    pub node_iou: f64,
    pub le_structural: usize,
    pub le_median_depth: Option<f64>,
    pub universe_median_depth: f64,
    pub null_p99: f64,
}

pub fn overlap(
    rate: &AttributionTable,
    class: &AttributionTable,
    k: usize,
    spec: &ModelSpec,
    null_samples: usize,
    seed: u64,
) -> Result<OverlapReport> {
    let rc = top_k(rate, k, spec)?;
    let cc = top_k(class, k, spec)?;
    let split = le_tf_decompose(&rc, &cc);
    let le_set = split.le.structural_set();
    let pool: Vec<EdgeRef> = rate.edges.keys().copied().collect();
    let universe: std::collections::BTreeSet<_> = pool.iter().map(|e| e.structural()).collect();
    let le_median_depth = if le_set.is_empty() {
        None
    } else {
        Some(median_depth(&le_set, spec.n_layers)?)
    };
    let null_p99 = structural_null_p99(&pool, k.min(pool.len()), null_samples, seed)?;
    Ok(OverlapReport {
        edge_iou: iou(&rc, &cc, Grain::Edge)?,
        node_iou: iou(&rc, &cc, Grain::Node)?,
        le_structural: le_set.len(),
        le_median_depth,
        universe_median_depth: median_depth(&universe, spec.n_layers)?,
        null_p99,
        rate: rc,
        class: cc,
        le: split.le,
        tf_rate: split.tf_rate,
        tf_class: split.tf_class,
    })
}

/// Shared trunk of the two formats' top-`k` circuits.
pub fn le_circuit(rate: &AttributionTable, class: &AttributionTable, k: usize, spec: &ModelSpec) -> Result<Circuit> {
    Ok(le_tf_decompose(&top_k(rate, k, spec)?, &top_k(class, k, spec)?).le)
}

/// Hooks for steering and the M4 readout: each non-embedding LE sender at the final
/// position.
pub fn le_hooks(le: &Circuit) -> Vec<NodeRef> {
    circuit_senders(le).into_iter().map(|c| NodeRef::new(c, -1)).collect()
}

/// Accuracy changes when every LE sender is zeroed.
pub fn zero_ablate_le(model: &Transformer, data: &Dataset, le: &Circuit) -> Result<(Vec<Component>, Vec<SuiteDelta>)> {
    let senders = circuit_senders(le);
    if senders.is_empty() {
        return Err(Error::InsufficientData("LE circuit has no internal senders".into()));
    }
    let deltas = zero_ablate_eval(model, &senders, &data.suites())?;
    Ok((senders, deltas))
}

/// Rating-format sources (true rating >= 4) transferred into classification-format
/// targets built from low-rated prompts.
pub fn fti_experiment(model: &Transformer, data: &Dataset, le: &Circuit) -> Result<(Vec<Component>, FtiReport)> {
    let nodes = circuit_internal_nodes(le);
    let task = &data.task;
    let sources: Vec<Vec<u32>> = data
        .eval_rating
        .iter()
        .filter(|e| e.rating.is_some_and(|r| r >= 4))
        .map(|e| e.tokens.clone())
        .collect();
    let targets: Vec<Vec<u32>> = data
        .eval_classification
        .iter()
        .filter(|e| e.rating.is_some_and(|r| r <= 2))
        .map(|e| e.tokens.clone())
        .collect();
    let n = sources.len().min(targets.len());
    let report = fti(
        model,
        &sources[..n],
        &targets[..n],
        &nodes,
        &task.rating_scale(),
        &task.labels(),
    )?;
    Ok((nodes, report))
}

/// Dose-response of rating steering on low-rated held-out prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub alphas: Vec<f64>,
    /// `ev[i][a]`: EV of prompt `i` at `alphas[a]`.
    pub ev: Vec<Vec<f64>>,
    /// Per-prompt Spearman correlation between alpha and EV.
    pub rho: Vec<f64>,
    /// Whether alpha = 0 reproduced the unsteered logits bit for bit on every prompt.
    pub zero_identical: bool,
    pub control_alpha: f64,
    /// Mean EV shift of the true direction at `control_alpha`.
    pub true_effect: f64,
    /// Mean EV shift under each random rotation at `control_alpha`.
    pub rotation_effects: Vec<f64>,
}

impl SteeringReport {
    pub fn max_rotation_effect(&self) -> f64 {
        self.rotation_effects.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

pub fn steering_experiment(
    model: &Transformer,
    data: &Dataset,
    bundle: &SteeringBundle,
    alphas: &[f64],
    n_prompts: usize,
    rotations: usize,
    control_alpha: f64,
    seed: u64,
) -> Result<SteeringReport> {
    let scale = data.task.rating_scale();
    let prompts: Vec<Prompt> = data
        .eval_rating
        .iter()
        .filter(|e| e.rating.is_some_and(|r| r <= 2))
        .take(n_prompts)
        .map(|e| e.tokens.clone().into())
        .collect();
    if prompts.is_empty() {
        return Err(Error::InsufficientData("no low-rated prompts to steer".into()));
    }
    let rows: Vec<(Vec<f64>, bool, Vec<f64>)> = prompts
        .par_iter()
        .map(|p| {
            let base = crate::model::forward(model, p, &crate::model::InterventionPlan::new())?;
            let zero = steer(model, p, bundle, 0.0, &scale)?;
            let base_dist = scale.distribution(base.row(base.rows - 1))?;
            let identical = base_dist == zero.distribution;
            let ev: Vec<f64> = alphas
                .iter()
                .map(|&a| Ok(steer(model, p, bundle, a, &scale)?.ev))
                .collect::<Result<_>>()?;
            let rot = random_rotation_control(model, p, bundle, control_alpha, rotations, seed, &scale)?;
            let shift = steer(model, p, bundle, control_alpha, &scale)?.ev - zero.ev;
            Ok((ev, identical, rot.into_iter().chain([shift]).collect()))
        })
        .collect::<Result<_>>()?;
    let rho = rows
        .iter()
        .map(|(ev, _, _)| spearman_rho(alphas, ev).unwrap_or(f64::NAN))
        .collect();
    let true_effect = mean(&rows.iter().map(|r| *r.2.last().expect("shift")).collect::<Vec<_>>()).unwrap_or(0.0);
    let rotation_effects = (0..rotations)
        .map(|j| mean(&rows.iter().map(|r| r.2[j]).collect::<Vec<_>>()).unwrap_or(0.0))
        .collect();
    Ok(SteeringReport {
        alphas: alphas.to_vec(),
        zero_identical: rows.iter().all(|r| r.1),
        ev: rows.into_iter().map(|r| r.0).collect(),
        rho,
        control_alpha,
        true_effect,
        rotation_effects,
    })
}

/// Steering bundle from the rating pairs at the LE hooks.
pub fn le_steering_bundle(model: &Transformer, data: &Dataset, le: &Circuit) -> Result<SteeringBundle> {
    let hooks = le_hooks(le);
    let runs = pair_runs(model, &data.task, &data.pairs)?;
    steering_vectors(&runs, &hooks, "rating")
}

/// Held-out judgment accuracy by task (restricted argmax).
pub fn heldout_accuracy(model: &Transformer, data: &Dataset) -> Result<Vec<(TaskKind, f64)>> {
    Ok(
        crate::tasks::evaluate_accuracy(model, &data.eval_all(), Some(&data.task))?
            .into_iter()
            .collect(),
    )
}
