// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numerical oracles: finite differences, brute-force patching, closed forms and
//! independently coded reference implementations.

mod common;

use common::*;
use judgecirc::attribution::{edge_universe, patched_metric, prepare_pair, EdgeRef};
use judgecirc::metrics::Metric;
use judgecirc::model::{
    forward, lrp_backward, Activation, BilinearRule, Component, InterventionPlan, LnRule, LrpRules, NonlinearityRule,
    Prompt,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_central_differences() {
    for seed in [11, 12, 13] {
        let m = random_model(&small_spec(Activation::Gelu), seed, 0.5);
        let samples = fd_gradient_check(&m, &[0, 3, 7, 1, 9, 4], 120, 1e-3, seed);
        let worst = samples.iter().map(FdSample::rel_err).fold(0.0, f64::max);
        assert!(worst < 1e-3, "model {seed}: worst relative error {worst}");
    }
}

fn worst_ratio_error(pairs: &[(f64, f64)]) -> (f64, usize) {
    let big: Vec<f64> = pairs
        .iter()
        .filter(|(_, bf)| bf.abs() > 1e-8)
        .map(|(s, bf)| (s / bf - 1.0).abs())
        .collect();
    (big.iter().copied().fold(0.0, f64::max), big.len())
}

#[test]
fn first_order_scores_match_patching_on_interpolated_pairs() {
    let m = random_model(&small_spec(Activation::Gelu), 21, 0.5);
    let (clean, corrupt) = ([0u32, 3, 7, 1, 9, 4], [0u32, 5, 7, 2, 9, 4]);
    let coarse = first_order_pairs(&m, &clean, &corrupt, 0.01);
    // Top edge at eps = 0.01.
    let &(s, bf) = coarse.iter().max_by(|a, b| a.0.abs().total_cmp(&b.0.abs())).unwrap();
    assert!((s / bf - 1.0).abs() < 0.05, "top edge ratio {}", s / bf);
    // Every edge at eps = 0.001, and the remaining error shrinks linearly in eps.
    let fine = first_order_pairs(&m, &clean, &corrupt, 0.001);
    let (e_fine, n) = worst_ratio_error(&fine);
    let (e_coarse, _) = worst_ratio_error(&coarse);
    assert!(n > 20);
    assert!(e_fine < 0.05, "worst ratio error {e_fine} at eps 0.001");
    let order = e_coarse / e_fine;
    assert!(
        (5.0..20.0).contains(&order),
        "error ratio {order} across a 10x change in eps"
    );
}

#[test]
fn identity_rules_equal_gradients_on_a_linear_network() {
    let err = identity_rule_error(31);
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn zeroing_every_component_leaves_the_embedding_readout() {
    let m = random_model(&small_spec(Activation::Gelu), 41, 0.5);
    let toks = [0u32, 3, 5, 11];
    let mut plan = InterventionPlan::new();
    for c in m.spec.internal_components() {
        plan = plan.zero(c);
    }
    let got = forward(&m, &Prompt::Tokens(toks.to_vec()), &plan).unwrap();
    let (d, v) = (m.spec.d_model, m.spec.vocab_size);
    let p = &m.p;
    for (t, &tok) in toks.iter().enumerate() {
        let x: Vec<f64> = (0..d)
            .map(|k| p.tok_emb[tok as usize * d + k] + p.pos_emb[t * d + k])
            .collect();
        let mu = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / d as f64;
        let y: Vec<f64> = (0..d)
            .map(|k| (x[k] - mu) / (var + m.spec.ln_epsilon).sqrt() * p.ln_f_g[k] + p.ln_f_b[k])
            .collect();
        for j in 0..v {
            let want: f64 = (0..d).map(|k| y[k] * p.w_u[k * v + j]).sum();
            assert!((got.get(t, j) - want).abs() < 1e-12, "t {t} j {j}");
        }
    }
}

#[test]
fn detached_normalizer_matches_a_hand_built_backward() {
    // One layer; the only LayerNorm whose normalizer matters for the Logits receiver
    // is ln_f. Its detached backward is r * (g*dy - mean(g*dy)).
    let mut spec = small_spec(Activation::Gelu);
    spec.n_layers = 1;
    let m = random_model(&spec, 51, 0.5);
    let p = Prompt::Tokens(vec![0, 2, 9]);
    let rules = LrpRules {
        ln: Some(LnRule::DetachNormalizer),
        nonlinearity: Some(NonlinearityRule::Exact),
        bilinear: Some(BilinearRule::Exact),
    };
    let (cache, g) = lrp_backward(&m, &p, &scale(), &rules).unwrap();
    let x = cache.residual_after(Component::Mlp { layer: 0 }).unwrap();
    let t = x.rows - 1;
    let (d, v) = (spec.d_model, spec.vocab_size);
    let dl = scale().gradient(cache.final_logits()).unwrap();
    let dy: Vec<f64> = (0..d)
        .map(|k| (0..v).map(|j| m.p.w_u[k * v + j] * dl[j]).sum())
        .collect();
    let row = x.row(t);
    let mu = row.iter().sum::<f64>() / d as f64;
    let var = row.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / d as f64;
    let r = 1.0 / (var + spec.ln_epsilon).sqrt();
    let gd: Vec<f64> = (0..d).map(|k| m.p.ln_f_g[k] * dy[k]).collect();
    let mean = gd.iter().sum::<f64>() / d as f64;
    let got = g.receiver(Component::Logits);
    for k in 0..d {
        assert!((got.get(t, k) - r * (gd[k] - mean)).abs() < 1e-12);
    }
}

/// A model that is affine in every sender output: constant causal-uniform attention
/// (zero query/key maps), identity MLP, and LayerNorms whose epsilon dwarfs the
/// activation variance so the normalizer is a constant.
fn linear_model(seed: u64) -> judgecirc::model::Transformer {
    let mut spec = small_spec(Activation::Identity);
    spec.n_layers = 1;
    spec.ln_epsilon = 1e12;
    let mut w = judgecirc::model::Weights::init_with_std(&spec, seed, 0.5).unwrap();
    let g = 1e6_f32;
    for l in &mut w.tensors.layers {
        l.w_q.iter_mut().chain(l.w_k.iter_mut()).for_each(|x| *x = 0.0);
        l.ln1_g.iter_mut().chain(l.ln2_g.iter_mut()).for_each(|x| *x = g);
    }
    w.tensors.ln_f_g.iter_mut().for_each(|x| *x = g);
    w.compile()
}

#[test]
fn single_edge_effects_add_up_in_a_linear_model() {
    let m = linear_model(61);
    struct Linear(Vec<f64>);
    impl Metric for Linear {
        fn value(&self, l: &[f64]) -> judgecirc::Result<f64> {
            Ok(l.iter().zip(&self.0).map(|(a, b)| a * b).sum())
        }
        fn gradient(&self, _: &[f64]) -> judgecirc::Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }
    let metric = Linear((0..m.spec.vocab_size).map(|j| (j as f64 * 0.7).sin()).collect());
    let clean: Prompt = vec![0u32, 3, 5, 7].into();
    let corrupt: Prompt = vec![0u32, 4, 5, 8].into();
    let run = prepare_pair(&m, &clean, &corrupt, &metric).unwrap();
    let universe = edge_universe(&m.spec, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    // Edge restorations add up only when no edge lies on another's path. Residual edges
    // that all leave the embedding satisfy this, since each one only replaces the
    // embedding's share of one receiver input. Cross edges qualify as long as no
    // residual edge in the set feeds the head at their source position.
    let value_site = |e: &EdgeRef| -> Option<(usize, usize, i64)> {
        match *e {
            EdgeRef::Residual {
                receiver: Component::Head { layer, head },
                position,
                ..
            } => Some((layer, head, position)),
            EdgeRef::AttnCross { layer, head, src, .. } => Some((layer, head, src)),
            _ => None,
        }
    };
    let mut subset: Vec<EdgeRef> = Vec::new();
    for i in rand::seq::index::sample(&mut rng, universe.len(), universe.len()) {
        let e = universe[i];
        let eligible = match e {
            EdgeRef::Residual { sender, .. } => sender == Component::Embed,
            EdgeRef::AttnCross { .. } => true,
        };
        let clash = subset.iter().any(|f| {
            value_site(f).is_some()
                && value_site(f) == value_site(&e)
                && std::mem::discriminant(f) != std::mem::discriminant(&e)
        });
        if eligible && !clash {
            subset.push(e);
        }
        if subset.len() == 12 {
            break;
        }
    }
    let joint = patched_metric(&m, &run.corrupt, &run.clean_cache, &subset, &metric, false).unwrap() - run.ev_corrupt;
    let single: f64 = subset
        .iter()
        .map(|e| judgecirc::attribution::brute_force_edge_effect(&m, &run, e, &metric, false).unwrap())
        .sum();
    assert!(joint.abs() > 1e-3, "degenerate construction: joint effect {joint}");
    assert!((joint - single).abs() < 1e-5, "joint {joint} vs sum {single}");
}

#[test]
fn spearman_matches_a_naive_rank_oracle() {
    let err = spearman_oracle_error();
    assert!(err < 1e-12, "{err}");
}

#[test]
fn ridge_closed_form_matches_gradient_descent() {
    let err = ridge_oracle_error();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pc1_matches_a_dense_eigensolver() {
    let err = pc1_oracle_error();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn permutation_null_expectation_follows_the_hypergeometric_approximation() {
    let (mean, expected) = null_mean_vs_hypergeometric();
    assert!((mean - expected).abs() / expected < 0.2, "{mean} vs {expected}");
}

#[test]
fn restoring_all_edges_into_every_receiver_recovers_clean() {
    let m = random_model(&small_spec(Activation::Gelu), 101, 0.5);
    let clean: Prompt = vec![0u32, 3, 5, 7, 2].into();
    let corrupt: Prompt = vec![0u32, 4, 5, 8, 2].into();
    let run = prepare_pair(&m, &clean, &corrupt, &scale()).unwrap();
    let all = edge_universe(&m.spec, 5);
    let ev = patched_metric(&m, &run.corrupt, &run.clean_cache, &all, &scale(), false).unwrap();
    assert!((ev - run.ev_clean).abs() < 1e-9);
}
