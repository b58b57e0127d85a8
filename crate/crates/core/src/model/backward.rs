// SPDX-License-Identifier: MIT OR Apache-2.0

use super::forward::{gelu_grad, LnCache};
use super::{
    forward_with_cache, Activation, ActivationCache, Component, InterventionPlan, ModelSpec, Prompt, Transformer,
};
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::tensor::{add_assign, gemm, Mat, View};

/// Backward rule at LayerNorm sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnRule {
    Exact,
    /// Treat the normalizer `1/std` as a constant.
    DetachNormalizer,
}

/// Backward rule at elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearityRule {
    Exact,
    /// Pass `f(x)/x` back in place of `f'(x)`.
    Identity,
}

/// Backward rule at the bilinear pattern-times-value site of each head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilinearRule {
    Exact,
    /// Split the product's relevance evenly between both factors.
    Half,
}

/// A complete rule assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackwardRules {
    pub ln: LnRule,
    pub nonlinearity: NonlinearityRule,
    pub bilinear: BilinearRule,
}

impl BackwardRules {
    pub const EXACT: Self = Self {
        ln: LnRule::Exact,
        nonlinearity: NonlinearityRule::Exact,
        bilinear: BilinearRule::Exact,
    };

    pub fn is_exact(&self) -> bool {
        *self == Self::EXACT
    }
}

/// Possibly partial rule assignment for [`lrp_backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LrpRules {
    pub ln: Option<LnRule>,
    pub nonlinearity: Option<NonlinearityRule>,
    pub bilinear: Option<BilinearRule>,
}

impl Default for LrpRules {
    /// LN-rule, Identity-rule, Half-rule.
    fn default() -> Self {
        Self {
            ln: Some(LnRule::DetachNormalizer),
            nonlinearity: Some(NonlinearityRule::Identity),
            bilinear: Some(BilinearRule::Half),
        }
    }
}

impl LrpRules {
    pub fn resolve(&self) -> Result<BackwardRules> {
        Ok(BackwardRules {
            ln: self.ln.ok_or(Error::UnassignedRuleSite("layer_norm"))?,
            nonlinearity: self.nonlinearity.ok_or(Error::UnassignedRuleSite("nonlinearity"))?,
            bilinear: self.bilinear.ok_or(Error::UnassignedRuleSite("bilinear"))?,
        })
    }
}

impl From<BackwardRules> for LrpRules {
    fn from(r: BackwardRules) -> Self {
        Self {
            ln: Some(r.ln),
            nonlinearity: Some(r.nonlinearity),
            bilinear: Some(r.bilinear),
        }
    }
}

/// Metric gradients (or rule coefficients) at every receiver read point and head output.
#[derive(Debug, Clone)]
pub struct GradCache {
    pub spec: ModelSpec,
    pub len: usize,
    pub rules: BackwardRules,
    /// `d metric / d input` per receiver, indexed by canonical index - 1. `[T, d_model]`
    pub receivers: Vec<Mat>,
    /// `d metric / d z` per head, `[layer * n_heads + head]`. `[T, d_head]`
    pub z: Vec<Mat>,
}

impl GradCache {
    pub fn receiver(&self, c: Component) -> &Mat {
        &self.receivers[self.spec.index_of(c) - 1]
    }

    pub fn z(&self, layer: usize, head: usize) -> &Mat {
        &self.z[layer * self.spec.n_heads + head]
    }

    /// Gradient w.r.t. a sender's output: the sum over every receiver it feeds.
    pub fn sender(&self, c: Component) -> Mat {
        let s = self.spec.index_of(c);
        let mut g = Mat::zeros(self.len, self.spec.d_model);
        for r in self.spec.receivers() {
            if s < self.spec.upstream_end(r) {
                add_assign(&mut g.data, &self.receiver(r).data);
            }
        }
        g
    }
}

fn ln_backward(dy: &Mat, gain: &[f64], ln: &LnCache, rule: LnRule) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for t in 0..dy.rows {
        let dyr = dy.row(t);
        for k in 0..d {
            dxhat[k] = dyr[k] * gain[k];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let xh = ln.xhat.row(t);
        let r = ln.rstd[t];
        let out = dx.row_mut(t);
        match rule {
            LnRule::Exact => {
                let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for k in 0..d {
                    out[k] = r * (dxhat[k] - mean_d - xh[k] * mean_dx);
                }
            }
            LnRule::DetachNormalizer => {
                for k in 0..d {
                    out[k] = r * (dxhat[k] - mean_d);
                }
            }
        }
    }
    dx
}

fn check_finite(m: &Mat, c: Component) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { node: c.to_string() })
    }
}

/// Reverse pass from logit gradients `d_logits` (`[T, vocab]`) through a cached run.
pub fn backward(
    model: &Transformer,
    cache: &ActivationCache,
    d_logits: &Mat,
    rules: BackwardRules,
) -> Result<GradCache> {
    let spec = &model.spec;
    if cache.has_edge_substitutions {
        return Err(Error::Config(
            "backward through edge-level substitutions is not supported".into(),
        ));
    }
    if d_logits.rows != cache.len || d_logits.cols != spec.vocab_size {
        return Err(Error::DimensionMismatch {
            expected: cache.len * spec.vocab_size,
            got: d_logits.rows * d_logits.cols,
        });
    }
    let len = cache.len;
    let (d, nh, dh) = (spec.d_model, spec.n_heads, spec.d_head);
    let n_recv = spec.n_components() - 1;
    let mut receivers: Vec<Mat> = vec![Mat::zeros(0, 0); n_recv];
    let mut zgrads: Vec<Mat> = vec![Mat::zeros(0, 0); spec.n_layers * nh];
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dy = Mat::zeros(len, d);
    gemm(
        1.0,
        d_logits.view(),
        View::block(&model.p.w_u, 0, d, spec.vocab_size).t(),
        0.0,
        dy.view_mut(),
    );
    let g_logits = ln_backward(&dy, &model.p.ln_f_g, &cache.final_ln, rules.ln);
    check_finite(&g_logits, Component::Logits)?;
    let mut g_down = g_logits.clone();
    receivers[n_recv - 1] = g_logits;

    let masked = |g: &Mat, s: usize| -> Mat {
        let mut g = g.clone();
        for (t, &f) in cache.frozen[s].iter().enumerate() {
            if f {
                g.row_mut(t).fill(0.0);
            }
        }
        g
    };

    for l in (0..spec.n_layers).rev() {
        let lw = &model.p.layers[l];

        let c = Component::Mlp { layer: l };
        let s = spec.index_of(c);
        let ds = masked(&g_down, s);
        let mc = cache.mlp(l);
        let mut dpre = Mat::zeros(len, spec.d_mlp);
        gemm(
            1.0,
            ds.view(),
            View::block(&lw.w_out, 0, spec.d_mlp, d).t(),
            0.0,
            dpre.view_mut(),
        );
        for (g, (&x, &a)) in dpre.data.iter_mut().zip(mc.pre.data.iter().zip(&mc.act.data)) {
            *g *= match (rules.nonlinearity, spec.activation) {
                (_, Activation::Identity) => 1.0,
                (NonlinearityRule::Exact, Activation::Gelu) => gelu_grad(x),
                (NonlinearityRule::Identity, Activation::Gelu) => {
                    if x == 0.0 {
                        0.5
                    } else {
                        a / x
                    }
                }
            };
        }
        let mut dy = Mat::zeros(len, d);
        gemm(
            1.0,
            dpre.view(),
            View::block(&lw.w_in, 0, d, spec.d_mlp).t(),
            0.0,
            dy.view_mut(),
        );
        let g = ln_backward(&dy, &lw.ln2_g, &mc.ln, rules.ln);
        check_finite(&g, c)?;
        add_assign(&mut g_down.data, &g.data);
        receivers[s - 1] = g;

        let mut layer_sum = Mat::zeros(len, d);
        for h in 0..nh {
            let c = Component::Head { layer: l, head: h };
            let s = spec.index_of(c);
            let hc = cache.head(l, h);
            let ds = masked(&g_down, s);
            let mut dz = Mat::zeros(len, dh);
            gemm(
                1.0,
                ds.view(),
                View::block(&lw.w_o, h * dh * d, dh, d).t(),
                0.0,
                dz.view_mut(),
            );
            let half = match rules.bilinear {
                BilinearRule::Exact => 1.0,
                BilinearRule::Half => 0.5,
            };
            let mut dq = Mat::zeros(len, dh);
            let mut dk = Mat::zeros(len, dh);
            let mut dv = Mat::zeros(len, dh);
            for j in 0..len {
                let a = &hc.pattern.row(j)[..=j];
                let dzj = dz.row(j);
                let da: Vec<f64> = (0..=j)
                    .map(|i| half * dzj.iter().zip(hc.v.row(i)).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                for (i, &ai) in a.iter().enumerate() {
                    let dvi = dv.row_mut(i);
                    for (o, z) in dvi.iter_mut().zip(dzj) {
                        *o += half * ai * z;
                    }
                }
                let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for i in 0..=j {
                    let dsc = a[i] * (da[i] - dot) * scale;
                    if dsc == 0.0 {
                        continue;
                    }
                    let (qj, ki) = (hc.q.row(j).to_vec(), hc.k.row(i).to_vec());
                    for (o, kv) in dq.row_mut(j).iter_mut().zip(&ki) {
                        *o += dsc * kv;
                    }
                    for (o, qv) in dk.row_mut(i).iter_mut().zip(&qj) {
                        *o += dsc * qv;
                    }
                }
            }
            let mut dy = Mat::zeros(len, d);
            for (grad, w) in [(&dq, &lw.w_q), (&dk, &lw.w_k), (&dv, &lw.w_v)] {
                gemm(
                    1.0,
                    grad.view(),
                    View::block(w, h * d * dh, d, dh).t(),
                    1.0,
                    dy.view_mut(),
                );
            }
            let g = ln_backward(&dy, &lw.ln1_g, &hc.ln, rules.ln);
            check_finite(&g, c)?;
            if !dz.is_finite() {
                return Err(Error::NonFiniteGradient { node: format!("{c}.z") });
            }
            add_assign(&mut layer_sum.data, &g.data);
            receivers[s - 1] = g;
            zgrads[l * nh + h] = dz;
        }
        add_assign(&mut g_down.data, &layer_sum.data);
    }

    Ok(GradCache {
        spec: spec.clone(),
        len,
        rules,
        receivers,
        z: zgrads,
    })
}

/// Logit gradient matrix that is nonzero only at the final position.
pub(crate) fn final_position_seed(spec: &ModelSpec, len: usize, grad: &[f64]) -> Mat {
    let mut d = Mat::zeros(len, spec.vocab_size);
    d.row_mut(len - 1).copy_from_slice(grad);
    d
}

/// Exact reverse-mode gradients of `metric` (a function of final-position logits).
pub fn backward_gradients(
    model: &Transformer,
    prompt: &Prompt,
    metric: &dyn Metric,
) -> Result<(ActivationCache, GradCache)> {
    let (_, cache) = forward_with_cache(model, prompt, &InterventionPlan::new())?;
    let g = metric.gradient(cache.final_logits())?;
    let seed = final_position_seed(&model.spec, cache.len, &g);
    let grads = backward(model, &cache, &seed, BackwardRules::EXACT)?;
    Ok((cache, grads))
}

/// Backward pass with LRP rule substitution at LayerNorm, nonlinearity and bilinear sites.
pub fn lrp_backward(
    model: &Transformer,
    prompt: &Prompt,
    metric: &dyn Metric,
    rules: &LrpRules,
) -> Result<(ActivationCache, GradCache)> {
    let rules = rules.resolve()?;
    let (_, cache) = forward_with_cache(model, prompt, &InterventionPlan::new())?;
    let g = metric.gradient(cache.final_logits())?;
    let seed = final_position_seed(&model.spec, cache.len, &g);
    let grads = backward(model, &cache, &seed, rules)?;
    Ok((cache, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ConstantMetric, RatingScale};
    use crate::model::Weights;

    fn spec() -> ModelSpec {
        ModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 12,
            max_seq: 8,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn constant_metric_has_zero_gradients() {
        let m = Weights::init_with_std(&spec(), 1, 0.5).unwrap().compile();
        let p = Prompt::Tokens(vec![0, 3, 4, 5]);
        let (_, g) = backward_gradients(&m, &p, &ConstantMetric(2.5)).unwrap();
        assert!(g.receivers.iter().all(|r| r.data.iter().all(|&x| x == 0.0)));
        assert!(g.z.iter().all(|r| r.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn unassigned_rule_site_is_reported() {
        let m = Weights::init(&spec(), 1).unwrap().compile();
        let p = Prompt::Tokens(vec![0, 3]);
        let scale = RatingScale::new(vec![1, 2, 3, 4, 5]).unwrap();
        let mut rules = LrpRules::default();
        rules.bilinear = None;
        assert!(matches!(
            lrp_backward(&m, &p, &scale, &rules),
            Err(Error::UnassignedRuleSite("bilinear"))
        ));
    }

    #[test]
    fn exact_rules_match_backward_gradients() {
        let m = Weights::init_with_std(&spec(), 2, 0.5).unwrap().compile();
        let p = Prompt::Tokens(vec![0, 3, 4, 9, 1]);
        let scale = RatingScale::new(vec![1, 2, 3, 4, 5]).unwrap();
        let (_, a) = backward_gradients(&m, &p, &scale).unwrap();
        let (_, b) = lrp_backward(&m, &p, &scale, &BackwardRules::EXACT.into()).unwrap();
        assert_eq!(a.receivers, b.receivers);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn frozen_rows_block_gradient() {
        let m = Weights::init_with_std(&spec(), 3, 0.5).unwrap().compile();
        let p = Prompt::Tokens(vec![0, 3, 4, 9, 1]);
        let plan = InterventionPlan::new().zero(Component::Mlp { layer: 0 });
        let (_, cache) = forward_with_cache(&m, &p, &plan).unwrap();
        let scale = RatingScale::new(vec![1, 2, 3, 4, 5]).unwrap();
        let seed = final_position_seed(&m.spec, cache.len, &scale.gradient(cache.final_logits()).unwrap());
        let g = backward(&m, &cache, &seed, BackwardRules::EXACT).unwrap();
        assert!(g.receiver(Component::Mlp { layer: 0 }).data.iter().all(|&x| x == 0.0));
    }
}
