// SPDX-License-Identifier: MIT OR Apache-2.0

use super::plan::ResolvedPlan;
use super::{resolve_position, Activation, Component, InterventionPlan, ModelSpec, NodeRef, Transformer};
use crate::error::{Error, Result};
use crate::tensor::{add_assign, gemm, Mat, View, ViewMut};

/// Model input: token ids, or the embedding-sender output directly (token + positional
/// embedding rows), which allows interpolating between prompts.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Tokens(Vec<u32>),
    Embedded(Mat),
}

impl Prompt {
    pub fn len(&self) -> usize {
        match self {
            Prompt::Tokens(t) => t.len(),
            Prompt::Embedded(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<Vec<u32>> for Prompt {
    fn from(t: Vec<u32>) -> Self {
        Prompt::Tokens(t)
    }
}

impl From<&[u32]> for Prompt {
    fn from(t: &[u32]) -> Self {
        Prompt::Tokens(t.to_vec())
    }
}

/// Normalized input and reciprocal standard deviation of one LayerNorm application.
#[derive(Debug, Clone, PartialEq)]
pub struct LnCache {
    pub xhat: Mat,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub ln: LnCache,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// `[dest, src]`, zero above the diagonal.
    pub pattern: Mat,
    /// Pre-`W_O` output.
    pub z: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub ln: LnCache,
    pub pre: Mat,
    pub act: Mat,
}

/// Everything recorded by [`forward_with_cache`].
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub spec: ModelSpec,
    pub len: usize,
    /// Residual-stream contribution of each sender, indexed canonically. `[T, d_model]`
    pub contributions: Vec<Mat>,
    /// Read-point (pre-LN) residual input of each receiver, indexed by canonical index - 1.
    pub inputs: Vec<Mat>,
    /// `[layer * n_heads + head]`
    pub heads: Vec<HeadCache>,
    pub mlps: Vec<MlpCache>,
    pub final_ln: LnCache,
    pub logits: Mat,
    /// `[sender][t]`: output replaced by Zero/Patch, so no gradient flows into the sender.
    pub frozen: Vec<Vec<bool>>,
    pub has_edge_substitutions: bool,
}

impl ActivationCache {
    pub fn contribution(&self, c: Component) -> &Mat {
        &self.contributions[self.spec.index_of(c)]
    }

    /// Read-point input of a receiver.
    pub fn input(&self, c: Component) -> &Mat {
        &self.inputs[self.spec.index_of(c) - 1]
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.heads[layer * self.spec.n_heads + head]
    }

    pub fn mlp(&self, layer: usize) -> &MlpCache {
        &self.mlps[layer]
    }

    /// A sender's output vector at a (signed) position.
    pub fn node_output(&self, node: NodeRef) -> Result<&[f64]> {
        self.spec.check_component(node.component)?;
        if !node.component.is_sender() {
            return Err(Error::UnknownNode(format!("{} has no output", node.component)));
        }
        let t = resolve_position(node.position, self.len)?;
        Ok(self.contribution(node.component).row(t))
    }

    pub fn final_logits(&self) -> &[f64] {
        self.logits.row(self.len - 1)
    }

    /// Residual stream immediately after `c` has written, i.e. the sequential sum of all
    /// senders up to and including `c`. For `Logits` this is the final residual.
    pub fn residual_after(&self, c: Component) -> Result<Mat> {
        self.spec.check_component(c)?;
        let end = match c {
            Component::Logits => self.spec.n_components() - 1,
            other => self.spec.index_of(other) + 1,
        };
        let mut r = Mat::zeros(self.len, self.spec.d_model);
        for s in 0..end {
            add_assign(&mut r.data, &self.contributions[s].data);
        }
        Ok(r)
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => gelu(x),
        Activation::Identity => x,
    }
}

pub(crate) fn activation_grad(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => gelu_grad(x),
        Activation::Identity => 1.0,
    }
}

/// Row-wise LayerNorm with population variance.
pub(crate) fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> (Mat, LnCache) {
    let d = x.cols;
    let mut xhat = Mat::zeros(x.rows, d);
    let mut y = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(t);
        for k in 0..d {
            xh[k] = (row[k] - mean) * r;
        }
        let yr = y.row_mut(t);
        for k in 0..d {
            yr[k] = xh[k] * g[k] + b[k];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// `x @ w + bias` with `w` a contiguous `[x.cols, out]` block of `w_data` at `offset`.
pub(crate) fn affine(x: &Mat, w_data: &[f64], offset: usize, out: usize, bias: &[f64]) -> Mat {
    let mut y = Mat::zeros(x.rows, out);
    for t in 0..x.rows {
        y.row_mut(t).copy_from_slice(bias);
    }
    gemm(
        1.0,
        x.view(),
        View::block(w_data, offset, x.cols, out),
        1.0,
        ViewMut::block(&mut y.data, 0, x.rows, out),
    );
    y
}

/// Causal softmax row `j` of `q k^T / sqrt(d_head)`.
pub(crate) fn attention_row(q: &[f64], keys: &[&[f64]], scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    crate::tensor::softmax(&scores)
}

/// Token + positional embedding rows.
pub fn embed_tokens(model: &Transformer, tokens: &[u32]) -> Result<Mat> {
    let spec = &model.spec;
    check_len(spec, tokens.len())?;
    let d = spec.d_model;
    let mut e = Mat::zeros(tokens.len(), d);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= spec.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: tok,
                vocab_size: spec.vocab_size,
            });
        }
        let row = e.row_mut(t);
        let te = &model.p.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &model.p.pos_emb[t * d..(t + 1) * d];
        for k in 0..d {
            row[k] = te[k] + pe[k];
        }
    }
    Ok(e)
}

fn check_len(spec: &ModelSpec, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Config("empty prompt".into()));
    }
    if len > spec.max_seq {
        return Err(Error::SequenceTooLong {
            len,
            max_seq: spec.max_seq,
        });
    }
    Ok(())
}

/// Logits at every position.
pub fn forward(model: &Transformer, prompt: &Prompt, plan: &InterventionPlan) -> Result<Mat> {
    forward_with_cache(model, prompt, plan).map(|(l, _)| l)
}

/// Forward pass recording every sender output, receiver input and head internals.
///
/// The residual stream is accumulated one sender at a time in canonical order, and any
/// receiver with edge substitutions re-sums its private input in that same order, so a
/// run whose substitutions reproduce another run's values reproduces its logits exactly.
pub fn forward_with_cache(
    model: &Transformer,
    prompt: &Prompt,
    plan: &InterventionPlan,
) -> Result<(Mat, ActivationCache)> {
    let spec = &model.spec;
    let len = prompt.len();
    check_len(spec, len)?;
    let plan = plan.resolve(spec, len)?;
    let (d, nh, dh) = (spec.d_model, spec.n_heads, spec.d_head);
    let n_senders = spec.n_components() - 1;

    let mut contributions: Vec<Mat> = Vec::with_capacity(n_senders);
    let mut inputs: Vec<Mat> = Vec::with_capacity(n_senders);
    let mut frozen = Vec::with_capacity(n_senders);
    let mut heads = Vec::with_capacity(spec.n_layers * nh);
    let mut mlps = Vec::with_capacity(spec.n_layers);

    let mut emb = match prompt {
        Prompt::Tokens(t) => embed_tokens(model, t)?,
        Prompt::Embedded(m) => {
            if m.cols != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: m.cols,
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("embedded prompt".into()));
            }
            m.clone()
        }
    };
    frozen.push(plan.apply_sender(0, &mut emb));
    let mut resid = Mat::zeros(len, d);
    add_assign(&mut resid.data, &emb.data);
    contributions.push(emb);

    let eps = spec.ln_epsilon;
    let scale = 1.0 / (dh as f64).sqrt();
    for (l, lw) in model.p.layers.iter().enumerate() {
        let shared = resid.clone();
        let (shared_y, shared_ln) = layer_norm(&shared, &lw.ln1_g, &lw.ln1_b, eps);
        for h in 0..nh {
            let c = Component::Head { layer: l, head: h };
            let r = spec.index_of(c);
            let (x, y, ln) = if plan.receiver_has_subs(r) {
                let x = private_input(&plan, r, spec.upstream_end(c), &contributions, &shared);
                let (y, ln) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b, eps);
                (x, y, ln)
            } else {
                (shared.clone(), shared_y.clone(), shared_ln.clone())
            };
            let q = affine(&y, &lw.w_q, h * d * dh, dh, &lw.b_q[h * dh..(h + 1) * dh]);
            let k = affine(&y, &lw.w_k, h * d * dh, dh, &lw.b_k[h * dh..(h + 1) * dh]);
            let v = affine(&y, &lw.w_v, h * d * dh, dh, &lw.b_v[h * dh..(h + 1) * dh]);
            let flat = l * nh + h;
            let mut pattern = Mat::zeros(len, len);
            let mut z = Mat::zeros(len, dh);
            for j in 0..len {
                let subs: Vec<_> = plan
                    .value_subs
                    .range((flat, j, 0)..(flat, j + 1, 0))
                    .map(|(&(_, _, i), val)| (i, val))
                    .collect();
                let mut keys: Vec<&[f64]> = (0..=j).map(|i| k.row(i)).collect();
                let mut vals: Vec<&[f64]> = (0..=j).map(|i| v.row(i)).collect();
                for (i, (val, key)) in &subs {
                    vals[*i] = val;
                    if let Some(key) = key {
                        keys[*i] = key;
                    }
                }
                let a = attention_row(q.row(j), &keys, scale);
                pattern.row_mut(j)[..=j].copy_from_slice(&a);
                let zr = z.row_mut(j);
                for (i, ai) in a.iter().enumerate() {
                    for (zk, vk) in zr.iter_mut().zip(vals[i]) {
                        *zk += ai * vk;
                    }
                }
            }
            let mut out = Mat::zeros(len, d);
            gemm(
                1.0,
                z.view(),
                View::block(&lw.w_o, h * dh * d, dh, d),
                0.0,
                out.view_mut(),
            );
            frozen.push(plan.apply_sender(r, &mut out));
            add_assign(&mut resid.data, &out.data);
            contributions.push(out);
            inputs.push(x);
            heads.push(HeadCache {
                ln,
                q,
                k,
                v,
                pattern,
                z,
            });
        }

        let c = Component::Mlp { layer: l };
        let r = spec.index_of(c);
        let x = if plan.receiver_has_subs(r) {
            private_input(&plan, r, r, &contributions, &resid)
        } else {
            resid.clone()
        };
        let (y, ln) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b, eps);
        let pre = affine(&y, &lw.w_in, 0, spec.d_mlp, &lw.b_in);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = activate(spec.activation, *v));
        let mut out = affine(&act, &lw.w_out, 0, d, &lw.b_out);
        frozen.push(plan.apply_sender(r, &mut out));
        add_assign(&mut resid.data, &out.data);
        contributions.push(out);
        inputs.push(x);
        mlps.push(MlpCache { ln, pre, act });
    }

    let r = spec.n_components() - 1;
    let x = if plan.receiver_has_subs(r) {
        private_input(&plan, r, r, &contributions, &resid)
    } else {
        resid
    };
    let (y, final_ln) = layer_norm(&x, &model.p.ln_f_g, &model.p.ln_f_b, eps);
    let mut logits = Mat::zeros(len, spec.vocab_size);
    gemm(
        1.0,
        y.view(),
        View::block(&model.p.w_u, 0, d, spec.vocab_size),
        0.0,
        logits.view_mut(),
    );
    inputs.push(x);
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let cache = ActivationCache {
        spec: spec.clone(),
        len,
        contributions,
        inputs,
        heads,
        mlps,
        final_ln,
        logits: logits.clone(),
        frozen,
        has_edge_substitutions: plan.has_edge_substitutions(),
    };
    Ok((logits, cache))
}

/// Receiver input with edge substitutions, re-summed in canonical order on affected rows.
fn private_input(plan: &ResolvedPlan, r: usize, upstream_end: usize, contributions: &[Mat], shared: &Mat) -> Mat {
    let mut x = shared.clone();
    let mut rows: Vec<usize> = plan
        .sender_subs
        .range((r, 0, 0)..(r + 1, 0, 0))
        .map(|(&(_, t, _), _)| t)
        .collect();
    rows.dedup();
    for t in rows {
        let row = x.row_mut(t);
        row.fill(0.0);
        for (s, contrib) in contributions.iter().enumerate().take(upstream_end) {
            let src = plan
                .sender_subs
                .get(&(r, t, s))
                .map_or(contrib.row(t), |v| v.as_slice());
            add_assign(row, src);
        }
    }
    x
}
