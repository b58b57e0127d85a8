// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{edge_universe, AttributionTable, EdgeRef, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{polarity, Metric};
use crate::model::{
    backward, embed_tokens, forward_with_cache, resolve_position, right_aligned, Action, ActivationCache,
    BackwardRules, GradCache, InterventionPlan, LrpRules, NodeRef, Prompt, Transformer,
};
use crate::tensor::{dot, Mat};

/// Which backward pass supplies the per-node gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    Gradient,
    Lrp(LrpRules),
}

impl BackwardMode {
    pub fn rules(&self) -> Result<BackwardRules> {
        match self {
            BackwardMode::Gradient => Ok(BackwardRules::EXACT),
            BackwardMode::Lrp(r) => r.resolve(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackwardMode::Gradient => "gradient",
            BackwardMode::Lrp(_) => "lrp",
        }
    }
}

/// Prompt whose gradients define the linearization point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSide {
    #[default]
    Corrupt,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeapOptions {
    pub mode: BackwardMode,
    pub side: GradientSide,
    /// Pairs with `|EV_clean - EV_corr|` below this are rejected.
    pub min_gap: f64,
}

impl Default for PeapOptions {
    fn default() -> Self {
        Self {
            mode: BackwardMode::Gradient,
            side: GradientSide::Corrupt,
            min_gap: 0.05,
        }
    }
}

/// Cached clean and corrupted runs of one pair.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub clean: Prompt,
    pub corrupt: Prompt,
    pub clean_cache: ActivationCache,
    pub corrupt_cache: ActivationCache,
    pub ev_clean: f64,
    pub ev_corrupt: f64,
}

impl PairRun {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn gap(&self) -> f64 {
        self.ev_clean - self.ev_corrupt
    }

    pub fn polarity(&self) -> Result<f64> {
        polarity(self.ev_clean, self.ev_corrupt)
    }

    pub fn check_gap(&self, min_gap: f64) -> Result<()> {
        let gap = self.gap().abs();
        if gap < min_gap || gap == 0.0 {
            return Err(Error::DegeneratePair {
                gap,
                threshold: min_gap,
            });
        }
        Ok(())
    }
}

/// Run both prompts of a pair and record the metric on each.
pub fn prepare_pair(model: &Transformer, clean: &Prompt, corrupt: &Prompt, metric: &dyn Metric) -> Result<PairRun> {
    if clean.len() != corrupt.len() {
        return Err(Error::DimensionMismatch {
            expected: clean.len(),
            got: corrupt.len(),
        });
    }
    let plan = InterventionPlan::new();
    let (_, clean_cache) = forward_with_cache(model, clean, &plan)?;
    let (_, corrupt_cache) = forward_with_cache(model, corrupt, &plan)?;
    Ok(PairRun {
        ev_clean: metric.value(clean_cache.final_logits())?,
        ev_corrupt: metric.value(corrupt_cache.final_logits())?,
        clean: clean.clone(),
        corrupt: corrupt.clone(),
        clean_cache,
        corrupt_cache,
    })
}

fn gradients(
    model: &Transformer,
    cache: &ActivationCache,
    metric: &dyn Metric,
    rules: BackwardRules,
) -> Result<GradCache> {
    let g = metric.gradient(cache.final_logits())?;
    let mut seed = Mat::zeros(cache.len, model.spec.vocab_size);
    seed.row_mut(cache.len - 1).copy_from_slice(&g);
    backward(model, cache, &seed, rules)
}

/// Score every edge of a pair with an explicit polarity `m` and no gap filter.
///
/// Residual edge `S -> R` at position `t`: `m * (S_clean[t] - S_corr[t]) . dR[t]`.
/// Cross edge of head `h` from `i` to `j`: `m * A[j,i] * (v_clean[i] - v_corr[i]) . dZ[j]`,
/// with `A` and the gradients taken from the run selected by `side`.
pub fn peap_scores_with_polarity(
    model: &Transformer,
    run: &PairRun,
    metric: &dyn Metric,
    m: f64,
    mode: BackwardMode,
    side: GradientSide,
    provenance: Provenance,
) -> Result<AttributionTable> {
    let spec = &model.spec;
    let len = run.len();
    let rules = mode.rules()?;
    let base = match side {
        GradientSide::Corrupt => &run.corrupt_cache,
        GradientSide::Clean => &run.clean_cache,
    };
    let grads = gradients(model, base, metric, rules)?;
    let (clean, corr) = (&run.clean_cache, &run.corrupt_cache);

    // Per-sender clean-minus-corrupt differences, reused for every receiver.
    let n_senders = spec.n_components() - 1;
    let diffs: Vec<Mat> = (0..n_senders)
        .map(|s| {
            let (a, b) = (&clean.contributions[s], &corr.contributions[s]);
            Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect())
        })
        .collect();

    let mut scores = Vec::with_capacity(super::universe_size(spec, len));
    for e in edge_universe(spec, len) {
        let s = match e {
            EdgeRef::Residual {
                sender,
                receiver,
                position,
            } => {
                let t = resolve_position(position, len)?;
                m * dot(diffs[spec.index_of(sender)].row(t), grads.receiver(receiver).row(t))
            }
            EdgeRef::AttnCross { layer, head, src, dst } => {
                let (i, j) = (resolve_position(src, len)?, resolve_position(dst, len)?);
                let (hc, hk) = (clean.head(layer, head), corr.head(layer, head));
                let a = base.head(layer, head).pattern.get(j, i);
                let dz = grads.z(layer, head).row(j);
                let dv: f64 =
                    hc.v.row(i)
                        .iter()
                        .zip(hk.v.row(i))
                        .zip(dz)
                        .map(|((x, y), g)| (x - y) * g)
                        .sum();
                m * a * dv
            }
        };
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("score of {e}")));
        }
        scores.push((e, s));
    }
    Ok(AttributionTable::from_scores(scores, provenance))
}

/// Single-pair PEAP table. The pair must pass the EV-gap filter.
pub fn peap_pair_scores(
    model: &Transformer,
    run: &PairRun,
    metric: &dyn Metric,
    opts: &PeapOptions,
    provenance: Provenance,
) -> Result<AttributionTable> {
    run.check_gap(opts.min_gap)?;
    let m = run.polarity()?;
    peap_scores_with_polarity(model, run, metric, m, opts.mode, opts.side, provenance)
}

/// Per-pair tables for a batch, scored in parallel. Pairs failing the gap filter are
/// skipped and their indices reported; results keep input order.
#[derive(Debug, Clone)]
pub struct ScoredPairs {
    pub tables: Vec<AttributionTable>,
    pub skipped: Vec<usize>,
}

pub fn score_pairs(
    model: &Transformer,
    pairs: &[(Prompt, Prompt)],
    metric: &dyn Metric,
    opts: &PeapOptions,
    provenance: &Provenance,
) -> Result<ScoredPairs> {
    let results: Vec<Result<Option<AttributionTable>>> = pairs
        .par_iter()
        .map(|(c, k)| {
            let run = prepare_pair(model, c, k, metric)?;
            match peap_pair_scores(model, &run, metric, opts, provenance.clone()) {
                Ok(t) => Ok(Some(t)),
                Err(Error::DegeneratePair { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = ScoredPairs {
        tables: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(t) => out.tables.push(t),
            None => out.skipped.push(i),
        }
    }
    Ok(out)
}

/// Plan that makes each listed edge carry `source`'s values in the run it is applied to.
///
/// Residual edges substitute the sender's output at the receiver's read point; cross
/// edges substitute the value vector (and, with `recompute_pattern`, the key) mixed into
/// the destination row.
pub fn restoration_plan(
    source: &ActivationCache,
    edges: &[EdgeRef],
    recompute_pattern: bool,
) -> Result<InterventionPlan> {
    let spec = &source.spec;
    let len = source.len;
    let mut plan = InterventionPlan::new();
    for e in edges {
        e.validate(spec, len)?;
        match *e {
            EdgeRef::Residual {
                sender,
                receiver,
                position,
            } => {
                let t = resolve_position(position, len)?;
                plan.push(Action::SubstituteSender {
                    receiver: NodeRef::new(receiver, right_aligned(t, len)),
                    sender,
                    value: source.contribution(sender).row(t).to_vec(),
                });
            }
            EdgeRef::AttnCross { layer, head, src, dst } => {
                let i = resolve_position(src, len)?;
                let h = source.head(layer, head);
                plan.push(Action::SubstituteValue {
                    layer,
                    head,
                    src,
                    dst,
                    value: h.v.row(i).to_vec(),
                    key: recompute_pattern.then(|| h.k.row(i).to_vec()),
                });
            }
        }
    }
    Ok(plan)
}

/// Metric of `base` run with `edges` carrying the values recorded in `source`.
pub fn patched_metric(
    model: &Transformer,
    base: &Prompt,
    source: &ActivationCache,
    edges: &[EdgeRef],
    metric: &dyn Metric,
    recompute_pattern: bool,
) -> Result<f64> {
    let plan = restoration_plan(source, edges, recompute_pattern)?;
    let (logits, _) = forward_with_cache(model, base, &plan)?;
    metric.value(logits.row(logits.rows - 1))
}

/// `EV(corrupted run with the edge restored to clean) - EV(corrupted run)`.
pub fn brute_force_edge_effect(
    model: &Transformer,
    run: &PairRun,
    edge: &EdgeRef,
    metric: &dyn Metric,
    recompute_pattern: bool,
) -> Result<f64> {
    let restored = patched_metric(
        model,
        &run.corrupt,
        &run.clean_cache,
        std::slice::from_ref(edge),
        metric,
        recompute_pattern,
    )?;
    Ok(restored - run.ev_corrupt)
}

/// Embedded prompt `clean + eps * (corrupt - clean)`.
pub fn interpolated_prompt(model: &Transformer, clean: &[u32], corrupt: &[u32], eps: f64) -> Result<Prompt> {
    let a = embed_tokens(model, clean)?;
    let b = embed_tokens(model, corrupt)?;
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch {
            expected: a.rows,
            got: b.rows,
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + eps * (y - x)).collect();
    Ok(Prompt::Embedded(Mat::from_vec(a.rows, a.cols, data)))
}
