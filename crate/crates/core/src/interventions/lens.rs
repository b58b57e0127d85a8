// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layer_norm, resolve_position, ActivationCache, NodeRef, Transformer};
use crate::tensor::{gemm, softmax, Mat, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReadout {
    pub node: NodeRef,
    /// Highest-probability tokens, descending.
    pub top: Vec<(u32, f64)>,
    /// Full-vocabulary probability of each target token.
    pub targets: Vec<(u32, f64)>,
    pub target_mass: f64,
    /// `max / min` target probability.
    pub ratio: f64,
    pub argmax: u32,
}

/// Project the residual stream right after `node.component` has written, at
/// `node.position`, through the final LayerNorm (unless `apply_ln` is false) and the
/// unembedding.
pub fn logit_lens(
    model: &Transformer,
    cache: &ActivationCache,
    node: NodeRef,
    targets: &[u32],
    top: usize,
    apply_ln: bool,
) -> Result<LensReadout> {
    let spec = &model.spec;
    let t = resolve_position(node.position, cache.len)?;
    if let Some(&bad) = targets.iter().find(|&&x| x as usize >= spec.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab_size: spec.vocab_size,
        });
    }
    let resid = cache.residual_after(node.component)?;
    let x = Mat::from_vec(1, spec.d_model, resid.row(t).to_vec());
    let y = if apply_ln {
        layer_norm(&x, &model.p.ln_f_g, &model.p.ln_f_b, spec.ln_epsilon).0
    } else {
        x
    };
    let mut logits = Mat::zeros(1, spec.vocab_size);
    gemm(
        1.0,
        y.view(),
        View::block(&model.p.w_u, 0, spec.d_model, spec.vocab_size),
        0.0,
        logits.view_mut(),
    );
    let p = softmax(logits.row(0));
    let mut order: Vec<u32> = (0..spec.vocab_size as u32).collect();
    order.sort_by(|a, b| p[*b as usize].total_cmp(&p[*a as usize]).then(a.cmp(b)));
    let tp: Vec<(u32, f64)> = targets.iter().map(|&x| (x, p[x as usize])).collect();
    let max = tp.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let min = tp.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    Ok(LensReadout {
        node,
        argmax: order[0],
        top: order.iter().take(top).map(|&x| (x, p[x as usize])).collect(),
        target_mass: tp.iter().map(|x| x.1).sum(),
        ratio: if tp.is_empty() { f64::NAN } else { max / min },
        targets: tp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::argmax_token;
    use crate::model::{forward_with_cache, Activation, Component, InterventionPlan, ModelSpec, Weights};

    #[test]
    fn final_readout_matches_model() {
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
        let m = Weights::init_with_std(&spec, 8, 0.5).unwrap().compile();
        let (logits, cache) = forward_with_cache(&m, &vec![0u32, 3, 5, 7].into(), &InterventionPlan::new()).unwrap();
        let r = logit_lens(&m, &cache, NodeRef::new(Component::Logits, -1), &[1, 2], 3, true).unwrap();
        let all: Vec<u32> = (0..12).collect();
        assert_eq!(r.argmax, argmax_token(logits.row(3), &all));
        assert_eq!(r.top.len(), 3);
        let same = logit_lens(&m, &cache, NodeRef::new(Component::Logits, -1), &[4, 4], 3, true).unwrap();
        assert_eq!(same.ratio, 1.0);
    }
}
