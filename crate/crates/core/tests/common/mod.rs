// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

use judgecirc::attribution::{
    brute_force_edge_effect, interpolated_prompt, peap_scores_with_polarity, prepare_pair, BackwardMode, GradientSide,
    Provenance,
};
use judgecirc::circuits::permutation_null;
use judgecirc::interventions::pc1;
use judgecirc::metrics::{spearman_rho, Metric, RatingScale};
use judgecirc::model::{
    backward_gradients, forward, lrp_backward, right_aligned, Action, Activation, BilinearRule, Component,
    InterventionPlan, LnRule, LrpRules, ModelSpec, NodeRef, NonlinearityRule, Prompt, Transformer, Weights,
};
use judgecirc::signals::Ridge;
use judgecirc::tensor::Mat;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_spec(activation: Activation) -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 16,
        vocab_size: 12,
        max_seq: 8,
        ln_epsilon: 1e-5,
        activation,
    }
}

pub fn random_model(spec: &ModelSpec, seed: u64, std: f64) -> Transformer {
    Weights::init_with_std(spec, seed, std).unwrap().compile()
}

pub fn scale() -> RatingScale {
    RatingScale::new(vec![1, 2, 3, 4, 5]).unwrap()
}

pub fn prov() -> Provenance {
    Provenance {
        mode: "gradient".into(),
        task: "test".into(),
        seed: 0,
    }
}

fn ev(model: &Transformer, prompt: &Prompt, plan: &InterventionPlan, metric: &dyn Metric) -> f64 {
    let l = forward(model, prompt, plan).unwrap();
    metric.value(l.row(l.rows - 1)).unwrap()
}

/// One sampled coordinate of the gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FdSample {
    pub analytic: f64,
    pub numeric: f64,
}

impl FdSample {
    /// Relative error with an absolute floor for coordinates that are numerically zero.
    pub fn rel_err(&self) -> f64 {
        let d = (self.analytic - self.numeric).abs();
        let m = self.analytic.abs().max(self.numeric.abs());
        if m < 1e-7 {
            d / 1e-7
        } else {
            d / m
        }
    }
}

/// Central finite differences (step `h`) against the reverse pass at `n` random
/// coordinates: sender outputs (perturbed with an additive hook) and receiver read
/// points (perturbed through a single-receiver substitution of the embedding).
pub fn fd_gradient_check(model: &Transformer, prompt: &[u32], n: usize, h: f64, seed: u64) -> Vec<FdSample> {
    let spec = &model.spec;
    let p = Prompt::Tokens(prompt.to_vec());
    let len = prompt.len();
    let metric = scale();
    let (cache, grads) = backward_gradients(model, &p, &metric).unwrap();
    let senders: Vec<Component> = spec.senders().collect();
    let receivers: Vec<Component> = spec.receivers().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0..len);
        let k = rng.random_range(0..spec.d_model);
        let pos = right_aligned(t, len);
        let (analytic, plus, minus) = if i % 2 == 0 {
            let c = senders[rng.random_range(0..senders.len())];
            let mut unit = vec![0.0; spec.d_model];
            unit[k] = 1.0;
            let plan = |s: f64| InterventionPlan::new().add(NodeRef::new(c, pos), unit.clone(), s);
            (grads.sender(c).get(t, k), plan(h), plan(-h))
        } else {
            let r = receivers[rng.random_range(0..receivers.len())];
            let base = cache.contribution(Component::Embed).row(t).to_vec();
            let plan = |s: f64| {
                let mut v = base.clone();
                v[k] += s;
                let mut p = InterventionPlan::new();
                p.push(Action::SubstituteSender {
                    receiver: NodeRef::new(r, pos),
                    sender: Component::Embed,
                    value: v,
                });
                p
            };
            (grads.receiver(r).get(t, k), plan(h), plan(-h))
        };
        let numeric = (ev(model, &p, &plus, &metric) - ev(model, &p, &minus, &metric)) / (2.0 * h);
        out.push(FdSample { analytic, numeric });
    }
    out
}

/// `(PEAP score, polarity * brute-force delta EV)` for every edge of an
/// `eps`-interpolated pair.
pub fn first_order_pairs(model: &Transformer, clean: &[u32], corrupt: &[u32], eps: f64) -> Vec<(f64, f64)> {
    let metric = scale();
    let c = interpolated_prompt(model, clean, corrupt, 0.0).unwrap();
    let k = interpolated_prompt(model, clean, corrupt, eps).unwrap();
    let run = prepare_pair(model, &c, &k, &metric).unwrap();
    let m = run.polarity().unwrap();
    let t = peap_scores_with_polarity(
        model,
        &run,
        &metric,
        m,
        BackwardMode::Gradient,
        GradientSide::Corrupt,
        prov(),
    )
    .unwrap();
    t.edges
        .iter()
        .map(|(e, s)| {
            (
                s.mean,
                m * brute_force_edge_effect(model, &run, e, &metric, false).unwrap(),
            )
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, 1)` between gradient and identity-rule LRP backward
/// passes on a random network with identity MLP activations.
pub fn identity_rule_error(seed: u64) -> f64 {
    let m = random_model(&small_spec(Activation::Identity), seed, 0.5);
    let p = Prompt::Tokens(vec![0, 4, 6, 2, 8]);
    let rules = LrpRules {
        ln: Some(LnRule::Exact),
        nonlinearity: Some(NonlinearityRule::Identity),
        bilinear: Some(BilinearRule::Exact),
    };
    let (_, a) = backward_gradients(&m, &p, &scale()).unwrap();
    let (_, b) = lrp_backward(&m, &p, &scale(), &rules).unwrap();
    let mut worst = 0.0f64;
    for (x, y) in a.receivers.iter().zip(&b.receivers).chain(a.z.iter().zip(&b.z)) {
        for (u, v) in x.data.iter().zip(&y.data) {
            worst = worst.max((u - v).abs() / u.abs().max(1.0));
        }
    }
    worst
}

pub fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let eq = v.iter().filter(|b| *b == a).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Worst disagreement with the naive rank oracle over 20 tied samples.
pub fn spearman_oracle_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        // Coarse rounding forces ties.
        let y: Vec<f64> = x.iter().map(|v| ((v + rng.random::<f64>()) * 4.0).round()).collect();
        worst = worst.max((spearman_rho(&x, &y).unwrap() - naive_spearman(&x, &y)).abs());
    }
    worst
}

/// Worst coefficient gap between the closed-form ridge fit and plain gradient descent
/// on `sum (y - b - x.w)^2 + lambda |w|^2`.
pub fn ridge_oracle_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let (n, d, lambda) = (60, 5, 2.0);
    let x = Mat::from_vec(n, d, (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect());
    let y: Vec<f64> = (0..n)
        .map(|i| 0.5 + x.row(i)[0] - 2.0 * x.row(i)[3] + rng.random::<f64>() * 0.1)
        .collect();
    let fit = Ridge::fit(&x, &y, lambda).unwrap();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..200_000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for i in 0..n {
            let r = b + x.row(i).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() - y[i];
            gb += 2.0 * r;
            for j in 0..d {
                gw[j] += 2.0 * r * x.row(i)[j];
            }
        }
        for j in 0..d {
            w[j] -= 2e-3 * (gw[j] + 2.0 * lambda * w[j]);
        }
        b -= 2e-3 * gb;
    }
    (0..d)
        .map(|j| (w[j] - fit.weights[j]).abs())
        .fold((b - fit.intercept).abs(), f64::max)
}

/// Worst component gap between power-iteration PC1 and nalgebra's symmetric
/// eigensolver, sign-aligned on the largest loading.
pub fn pc1_oracle_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = Mat::from_vec(10, 16, (0..160).map(|_| rng.random::<f64>() - 0.5).collect());
        let v = pc1(&x).unwrap();
        let xm = DMatrix::from_row_slice(10, 16, &x.data);
        let mean = xm.row_mean();
        let c = DMatrix::from_fn(10, 16, |i, j| xm[(i, j)] - mean[j]);
        let eig = SymmetricEigen::new(c.transpose() * &c);
        let top = eig.eigenvalues.imax();
        let u = eig.eigenvectors.column(top);
        let lead = (0..16).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap();
        let sign = u[lead].signum();
        for j in 0..16 {
            worst = worst.max((v[j] - sign * u[j]).abs());
        }
    }
    worst
}

/// `(null mean, k / (2N - k))` for size-100 subsets of a 10 000-element pool. The mean
/// is recovered by averaging the null's quantile function over a fine grid.
pub fn null_mean_vs_hypergeometric() -> (f64, f64) {
    let pool: Vec<u32> = (0..10_000).collect();
    let expected = 100.0 / (2.0 * 10_000.0 - 100.0);
    let grid = 200;
    let mean = (0..grid)
        .map(|i| permutation_null(&pool, &pool, 100, 1000, (i as f64 + 0.5) / grid as f64, 3).unwrap())
        .sum::<f64>()
        / grid as f64;
    (mean, expected)
}
