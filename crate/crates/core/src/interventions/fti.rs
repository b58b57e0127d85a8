// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{argmax_token, expected_rating, label_probability, LabelSet, RatingScale};
use crate::model::{
    forward, forward_with_cache, right_aligned, Component, InterventionPlan, NodeRef, Prompt, Transformer,
};
use crate::stats::{mean, sd};

/// Minimum source EV for a prompt to count as a pristine top rating.
pub const SOURCE_EV_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtiInstance {
    pub index: usize,
    pub source_ev: f64,
    /// Positive-label probability (full-vocabulary softmax) before and after the transfer.
    pub base_prob: f64,
    pub patched_prob: f64,
    pub base_token: u32,
    pub patched_token: u32,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtiReport {
    pub instances: Vec<FtiInstance>,
    pub candidates: usize,
    pub n: usize,
    pub flips: usize,
    pub flip_rate: f64,
    pub base_mean: f64,
    pub base_sd: f64,
    pub patched_mean: f64,
    pub patched_sd: f64,
    /// Patched argmax tokens outside the label set.
    pub off_label: usize,
}

/// Overwrite every position of `nodes` in `target` with their outputs from `source`.
pub fn transfer_plan(
    model: &Transformer,
    source: &Prompt,
    nodes: &[Component],
    len: usize,
) -> Result<InterventionPlan> {
    if source.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: source.len(),
        });
    }
    let (_, cache) = forward_with_cache(model, source, &InterventionPlan::new())?;
    let mut plan = InterventionPlan::new();
    for &c in nodes {
        for t in 0..len {
            plan = plan.patch(
                NodeRef::new(c, right_aligned(t, len)),
                cache.contribution(c).row(t).to_vec(),
            );
        }
    }
    Ok(plan)
}

/// Transfer without the inclusion filter.
pub fn fti_instance(
    model: &Transformer,
    source: &Prompt,
    target: &Prompt,
    nodes: &[Component],
    labels: &LabelSet,
) -> Result<(f64, u32, f64, u32)> {
    let base = forward(model, target, &InterventionPlan::new())?;
    let plan = transfer_plan(model, source, nodes, target.len())?;
    let patched = if plan.is_empty() {
        base.clone()
    } else {
        forward(model, target, &plan)?
    };
    let all: Vec<u32> = (0..model.spec.vocab_size as u32).collect();
    let b = base.row(base.rows - 1);
    let p = patched.row(patched.rows - 1);
    Ok((
        label_probability(b, labels)?.positive_mass,
        argmax_token(b, &all),
        label_probability(p, labels)?.positive_mass,
        argmax_token(p, &all),
    ))
}

/// Transfer `nodes` from each rating-format source into its classification-format
/// target. Instances enter only if the source EV exceeds 4 and the target's unpatched
/// argmax (full vocabulary) is not a positive label.
pub fn fti(
    model: &Transformer,
    sources: &[Vec<u32>],
    targets: &[Vec<u32>],
    nodes: &[Component],
    scale: &RatingScale,
    labels: &LabelSet,
) -> Result<FtiReport> {
    if sources.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: sources.len(),
            got: targets.len(),
        });
    }
    let all: Vec<u32> = (0..model.spec.vocab_size as u32).collect();
    let rows: Vec<Option<FtiInstance>> = sources
        .par_iter()
        .zip(targets)
        .enumerate()
        .map(|(index, (s, t))| {
            let (s, t): (Prompt, Prompt) = (s.clone().into(), t.clone().into());
            let src = forward(model, &s, &InterventionPlan::new())?;
            let source_ev = expected_rating(src.row(src.rows - 1), scale)?;
            let base = forward(model, &t, &InterventionPlan::new())?;
            let base_pred = argmax_token(base.row(base.rows - 1), &all);
            if source_ev <= SOURCE_EV_THRESHOLD || labels.is_positive(base_pred) {
                return Ok(None);
            }
            let (base_prob, base_token, patched_prob, patched_token) = fti_instance(model, &s, &t, nodes, labels)?;
            Ok(Some(FtiInstance {
                index,
                source_ev,
                base_prob,
                patched_prob,
                base_token,
                patched_token,
                flipped: labels.is_positive(patched_token),
            }))
        })
        .collect::<Result<_>>()?;
    let instances: Vec<FtiInstance> = rows.into_iter().flatten().collect();
    let n = instances.len();
    let flips = instances.iter().filter(|i| i.flipped).count();
    let base: Vec<f64> = instances.iter().map(|i| i.base_prob).collect();
    let patched: Vec<f64> = instances.iter().map(|i| i.patched_prob).collect();
    let label_tokens: Vec<u32> = labels.all().collect();
    Ok(FtiReport {
        candidates: sources.len(),
        n,
        flips,
        flip_rate: if n == 0 { 0.0 } else { flips as f64 / n as f64 },
        base_mean: mean(&base).unwrap_or(f64::NAN),
        base_sd: sd(&base).unwrap_or(f64::NAN),
        patched_mean: mean(&patched).unwrap_or(f64::NAN),
        patched_sd: sd(&patched).unwrap_or(f64::NAN),
        off_label: instances
            .iter()
            .filter(|i| !label_tokens.contains(&i.patched_token))
            .count(),
        instances,
    })
}
