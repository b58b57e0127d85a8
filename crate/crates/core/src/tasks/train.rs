// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training on the answer position.
//!
//! Training runs its own packed forward/backward: every sequence in a batch is laid out
//! row-wise in one matrix so projections and MLPs are single large matmuls, and
//! attention is applied per sequence block. Parameter gradients are accumulated in
//! `f64`; Adam keeps `f64` master weights that are rounded to `f32` at the end.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::argmax_token;
use crate::model::{activate, activation_grad, layer_norm, ModelSpec, Tensors, Transformer, Weights};
use crate::tensor::{gemm, softmax, Mat, View, ViewMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init_std: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: Weights,
    /// `(step, mean batch loss)` for every step.
    pub losses: Vec<(usize, f64)>,
    /// Full-vocabulary argmax accuracy per task on the training data.
    pub accuracy: BTreeMap<TaskKind, f64>,
}

/// Per-task accuracy of the final-position prediction.
///
/// With `restrict_to`, the argmax runs over the task's answer tokens only (rating
/// tokens or Yes/No); otherwise over the whole vocabulary.
pub fn evaluate_accuracy(
    model: &Transformer,
    examples: &[Example],
    restrict_to: Option<&TaskSpec>,
) -> Result<BTreeMap<TaskKind, f64>> {
    let mut hits: BTreeMap<TaskKind, (usize, usize)> = BTreeMap::new();
    let all: Vec<u32> = (0..model.spec.vocab_size as u32).collect();
    let (rating, binary) = match restrict_to {
        Some(task) => (task.rating_scale().tokens, vec![task.yes(), task.no()]),
        None => (all.clone(), all.clone()),
    };
    for chunk in examples.chunks(256) {
        let logits = packed_final_logits(model, chunk)?;
        for (e, row) in chunk.iter().zip(&logits) {
            let cands = if e.task == TaskKind::Rating { &rating } else { &binary };
            let pred = argmax_token(row, cands);
            let h = hits.entry(e.task).or_default();
            h.0 += (pred == e.target) as usize;
            h.1 += 1;
        }
    }
    Ok(hits.into_iter().map(|(k, (a, n))| (k, a as f64 / n as f64)).collect())
}

/// Train a fresh model from `Weights::init_with_std(spec, cfg.seed, cfg.init_std)`.
pub fn train(
    spec: &ModelSpec,
    data: &[Example],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let init = Weights::init_with_std(spec, cfg.seed, cfg.init_std)?;
    train_from(init, data, cfg, &mut progress)
}

/// Continue training from given weights.
pub fn train_from(
    init: Weights,
    data: &[Example],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Config("batch_size must be >= 1 and lr finite and >= 0".into()));
    }
    let spec = init.spec.clone();
    for e in data {
        if e.tokens.is_empty() || e.tokens.len() > spec.max_seq {
            return Err(Error::SequenceTooLong {
                len: e.tokens.len(),
                max_seq: spec.max_seq,
            });
        }
        if let Some(&t) = e
            .tokens
            .iter()
            .chain([&e.target])
            .find(|&&t| t as usize >= spec.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: spec.vocab_size,
            });
        }
    }
    let mut model = init.compile();
    let mut m = Tensors::filled(&spec, 0.0f64);
    let mut v = Tensors::filled(&spec, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0ba7c4);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last_stable = init;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = loss_and_grad(&model, &batch)?;
        if !loss.is_finite() || grads.slices().iter().any(|s| s.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged {
                step,
                last_stable: Box::new(last_stable),
            });
        }
        adam_step(&mut model.p, &grads, &mut m, &mut v, cfg, step + 1);
        losses.push((step, loss));
        progress(step, loss);
        if (step + 1) % 50 == 0 || step + 1 == cfg.steps {
            last_stable = model.to_weights();
        }
    }
    let weights = model.to_weights();
    let accuracy = evaluate_accuracy(&weights.compile(), data, None)?;
    Ok(TrainReport {
        weights,
        losses,
        accuracy,
    })
}

fn adam_step(
    p: &mut Tensors<f64>,
    g: &Tensors<f64>,
    m: &mut Tensors<f64>,
    v: &mut Tensors<f64>,
    cfg: &TrainConfig,
    t: usize,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((pp, gg), mm), vv) in p
        .slices_mut()
        .into_iter()
        .zip(g.slices())
        .zip(m.slices_mut())
        .zip(v.slices_mut())
    {
        for i in 0..pp.len() {
            mm[i] = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * gg[i];
            vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * gg[i] * gg[i];
            let mhat = mm[i] / bc1;
            let vhat = vv[i] / bc2;
            pp[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

struct LnState {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct LayerState {
    ln1: LnState,
    y1: Mat,
    q: Vec<Mat>,
    k: Vec<Mat>,
    v: Vec<Mat>,
    /// Per head, per sequence: row-major `[len, len]` causal pattern.
    a: Vec<Vec<Vec<f64>>>,
    z: Vec<Mat>,
    ln2: LnState,
    y2: Mat,
    pre: Mat,
    act: Mat,
}

struct Packed {
    /// `(row offset, length)` per sequence.
    seqs: Vec<(usize, usize)>,
    tokens: Vec<u32>,
    rows: usize,
}

impl Packed {
    fn new(batch: &[&Example]) -> Self {
        let mut seqs = Vec::with_capacity(batch.len());
        let mut tokens = Vec::new();
        for e in batch {
            seqs.push((tokens.len(), e.tokens.len()));
            tokens.extend_from_slice(&e.tokens);
        }
        let rows = tokens.len();
        Self { seqs, tokens, rows }
    }

    fn finals(&self) -> impl Iterator<Item = usize> + '_ {
        self.seqs.iter().map(|&(o, l)| o + l - 1)
    }
}

fn ln_forward(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> (Mat, LnState) {
    let (y, c) = layer_norm(x, g, b, eps);
    (
        y,
        LnState {
            xhat: c.xhat,
            rstd: c.rstd,
        },
    )
}

fn linear(x: &Mat, w: &[f64], off: usize, out: usize, bias: &[f64]) -> Mat {
    let mut y = Mat::zeros(x.rows, out);
    for t in 0..x.rows {
        y.row_mut(t).copy_from_slice(bias);
    }
    gemm(1.0, x.view(), View::block(w, off, x.cols, out), 1.0, y.view_mut());
    y
}

/// Forward over a packed batch; returns the final residual and per-layer state.
fn packed_forward(model: &Transformer, pk: &Packed) -> (Mat, Vec<LayerState>) {
    let spec = &model.spec;
    let (d, nh, dh) = (spec.d_model, spec.n_heads, spec.d_head);
    let p = &model.p;
    let mut x = Mat::zeros(pk.rows, d);
    for &(off, len) in &pk.seqs {
        for t in 0..len {
            let tok = pk.tokens[off + t] as usize;
            let row = x.row_mut(off + t);
            for k in 0..d {
                row[k] = p.tok_emb[tok * d + k] + p.pos_emb[t * d + k];
            }
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut states = Vec::with_capacity(spec.n_layers);
    for lw in &p.layers {
        let (y1, ln1) = ln_forward(&x, &lw.ln1_g, &lw.ln1_b, spec.ln_epsilon);
        let mut qs = Vec::with_capacity(nh);
        let mut ks = Vec::with_capacity(nh);
        let mut vs = Vec::with_capacity(nh);
        let mut as_ = Vec::with_capacity(nh);
        let mut zs = Vec::with_capacity(nh);
        for h in 0..nh {
            let q = linear(&y1, &lw.w_q, h * d * dh, dh, &lw.b_q[h * dh..(h + 1) * dh]);
            let k = linear(&y1, &lw.w_k, h * d * dh, dh, &lw.b_k[h * dh..(h + 1) * dh]);
            let v = linear(&y1, &lw.w_v, h * d * dh, dh, &lw.b_v[h * dh..(h + 1) * dh]);
            let mut z = Mat::zeros(pk.rows, dh);
            let mut pats = Vec::with_capacity(pk.seqs.len());
            for &(off, len) in &pk.seqs {
                let mut a = vec![0.0; len * len];
                for j in 0..len {
                    let qj = q.row(off + j);
                    let scores: Vec<f64> = (0..=j)
                        .map(|i| qj.iter().zip(k.row(off + i)).map(|(x, y)| x * y).sum::<f64>() * scale)
                        .collect();
                    let aj = softmax(&scores);
                    a[j * len..j * len + j + 1].copy_from_slice(&aj);
                    let zr = z.row_mut(off + j);
                    for (i, ai) in aj.iter().enumerate() {
                        for (zk, vk) in zr.iter_mut().zip(v.row(off + i)) {
                            *zk += ai * vk;
                        }
                    }
                }
                pats.push(a);
            }
            gemm(
                1.0,
                z.view(),
                View::block(&lw.w_o, h * dh * d, dh, d),
                1.0,
                x.view_mut(),
            );
            qs.push(q);
            ks.push(k);
            vs.push(v);
            as_.push(pats);
            zs.push(z);
        }
        let (y2, ln2) = ln_forward(&x, &lw.ln2_g, &lw.ln2_b, spec.ln_epsilon);
        let pre = linear(&y2, &lw.w_in, 0, spec.d_mlp, &lw.b_in);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = activate(spec.activation, *v));
        let out = linear(&act, &lw.w_out, 0, d, &lw.b_out);
        crate::tensor::add_assign(&mut x.data, &out.data);
        states.push(LayerState {
            ln1,
            y1,
            q: qs,
            k: ks,
            v: vs,
            a: as_,
            z: zs,
            ln2,
            y2,
            pre,
            act,
        });
    }
    (x, states)
}

fn final_rows(x: &Mat, pk: &Packed) -> Mat {
    let mut f = Mat::zeros(pk.seqs.len(), x.cols);
    for (b, r) in pk.finals().enumerate() {
        f.row_mut(b).copy_from_slice(x.row(r));
    }
    f
}

fn unembed(model: &Transformer, xf: &Mat) -> (Mat, Mat, LnState) {
    let spec = &model.spec;
    let (yf, lnf) = ln_forward(xf, &model.p.ln_f_g, &model.p.ln_f_b, spec.ln_epsilon);
    let mut logits = Mat::zeros(xf.rows, spec.vocab_size);
    gemm(
        1.0,
        yf.view(),
        View::block(&model.p.w_u, 0, spec.d_model, spec.vocab_size),
        0.0,
        logits.view_mut(),
    );
    (logits, yf, lnf)
}

/// Final-position logits for each example.
pub(crate) fn packed_final_logits(model: &Transformer, batch: &[Example]) -> Result<Vec<Vec<f64>>> {
    for e in batch {
        if e.tokens.is_empty() || e.tokens.len() > model.spec.max_seq {
            return Err(Error::SequenceTooLong {
                len: e.tokens.len(),
                max_seq: model.spec.max_seq,
            });
        }
        if let Some(&t) = e.tokens.iter().find(|&&t| t as usize >= model.spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: model.spec.vocab_size,
            });
        }
    }
    let refs: Vec<&Example> = batch.iter().collect();
    let pk = Packed::new(&refs);
    let (x, _) = packed_forward(model, &pk);
    let (logits, _, _) = unembed(model, &final_rows(&x, &pk));
    Ok((0..logits.rows).map(|r| logits.row(r).to_vec()).collect())
}

fn ln_back(dy: &Mat, gain: &[f64], st: &LnState, dg: &mut [f64], db: &mut [f64]) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxh = vec![0.0; d];
    for t in 0..dy.rows {
        let (dyr, xh) = (dy.row(t), st.xhat.row(t));
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
            dxh[k] = dyr[k] * gain[k];
        }
        let m1 = dxh.iter().sum::<f64>() / d as f64;
        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(t);
        for k in 0..d {
            out[k] = st.rstd[t] * (dxh[k] - m1 - xh[k] * m2);
        }
    }
    dx
}

fn col_sum_into(m: &Mat, out: &mut [f64]) {
    for t in 0..m.rows {
        for (o, x) in out.iter_mut().zip(m.row(t)) {
            *o += x;
        }
    }
}

/// Mean cross-entropy at the final position and its parameter gradient.
pub(crate) fn loss_and_grad(model: &Transformer, batch: &[&Example]) -> Result<(f64, Tensors<f64>)> {
    let spec = &model.spec;
    let (d, nh, dh) = (spec.d_model, spec.n_heads, spec.d_head);
    let p = &model.p;
    let pk = Packed::new(batch);
    let (x, states) = packed_forward(model, &pk);
    let xf = final_rows(&x, &pk);
    let (logits, yf, lnf) = unembed(model, &xf);
    let nb = batch.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    for (b, e) in batch.iter().enumerate() {
        let pr = softmax(logits.row(b));
        loss -= pr[e.target as usize].max(f64::MIN_POSITIVE).ln();
        let dr = dlogits.row_mut(b);
        for (o, pv) in dr.iter_mut().zip(&pr) {
            *o = pv / nb;
        }
        dr[e.target as usize] -= 1.0 / nb;
    }
    loss /= nb;

    let mut g = Tensors::filled(spec, 0.0f64);
    gemm(
        1.0,
        yf.view().t(),
        dlogits.view(),
        0.0,
        ViewMut::block(&mut g.w_u, 0, d, spec.vocab_size),
    );
    let mut dyf = Mat::zeros(yf.rows, d);
    gemm(
        1.0,
        dlogits.view(),
        View::block(&p.w_u, 0, d, spec.vocab_size).t(),
        0.0,
        dyf.view_mut(),
    );
    let dxf = ln_back(&dyf, &p.ln_f_g, &lnf, &mut g.ln_f_g, &mut g.ln_f_b);
    let mut dx = Mat::zeros(pk.rows, d);
    for (b, r) in pk.finals().enumerate() {
        dx.row_mut(r).copy_from_slice(dxf.row(b));
    }
    let scale = 1.0 / (dh as f64).sqrt();

    for l in (0..spec.n_layers).rev() {
        let (lw, st) = (&p.layers[l], &states[l]);
        let gl = &mut g.layers[l];

        // MLP
        col_sum_into(&dx, &mut gl.b_out);
        gemm(
            1.0,
            st.act.view().t(),
            dx.view(),
            0.0,
            ViewMut::block(&mut gl.w_out, 0, spec.d_mlp, d),
        );
        let mut dpre = Mat::zeros(pk.rows, spec.d_mlp);
        gemm(
            1.0,
            dx.view(),
            View::block(&lw.w_out, 0, spec.d_mlp, d).t(),
            0.0,
            dpre.view_mut(),
        );
        for (gv, &xv) in dpre.data.iter_mut().zip(&st.pre.data) {
            *gv *= activation_grad(spec.activation, xv);
        }
        col_sum_into(&dpre, &mut gl.b_in);
        gemm(
            1.0,
            st.y2.view().t(),
            dpre.view(),
            0.0,
            ViewMut::block(&mut gl.w_in, 0, d, spec.d_mlp),
        );
        let mut dy2 = Mat::zeros(pk.rows, d);
        gemm(
            1.0,
            dpre.view(),
            View::block(&lw.w_in, 0, d, spec.d_mlp).t(),
            0.0,
            dy2.view_mut(),
        );
        let dx2 = ln_back(&dy2, &lw.ln2_g, &st.ln2, &mut gl.ln2_g, &mut gl.ln2_b);
        crate::tensor::add_assign(&mut dx.data, &dx2.data);

        // Attention
        let mut dy1 = Mat::zeros(pk.rows, d);
        for h in 0..nh {
            let (q, k, v, z) = (&st.q[h], &st.k[h], &st.v[h], &st.z[h]);
            gemm(
                1.0,
                z.view().t(),
                dx.view(),
                0.0,
                ViewMut::block(&mut gl.w_o, h * dh * d, dh, d),
            );
            let mut dz = Mat::zeros(pk.rows, dh);
            gemm(
                1.0,
                dx.view(),
                View::block(&lw.w_o, h * dh * d, dh, d).t(),
                0.0,
                dz.view_mut(),
            );
            let mut dq = Mat::zeros(pk.rows, dh);
            let mut dk = Mat::zeros(pk.rows, dh);
            let mut dv = Mat::zeros(pk.rows, dh);
            for (si, &(off, len)) in pk.seqs.iter().enumerate() {
                let a = &st.a[h][si];
                for j in 0..len {
                    let aj = &a[j * len..j * len + j + 1];
                    let dzj = dz.row(off + j).to_vec();
                    let da: Vec<f64> = (0..=j)
                        .map(|i| dzj.iter().zip(v.row(off + i)).map(|(x, y)| x * y).sum())
                        .collect();
                    for (i, &ai) in aj.iter().enumerate() {
                        for (o, zv) in dv.row_mut(off + i).iter_mut().zip(&dzj) {
                            *o += ai * zv;
                        }
                    }
                    let dot: f64 = aj.iter().zip(&da).map(|(x, y)| x * y).sum();
                    let qj = q.row(off + j).to_vec();
                    for i in 0..=j {
                        let ds = aj[i] * (da[i] - dot) * scale;
                        for (o, kv) in dq.row_mut(off + j).iter_mut().zip(k.row(off + i)) {
                            *o += ds * kv;
                        }
                        for (o, qv) in dk.row_mut(off + i).iter_mut().zip(&qj) {
                            *o += ds * qv;
                        }
                    }
                }
            }
            for (grad, w, gw, gb) in [
                (&dq, &lw.w_q, &mut gl.w_q, &mut gl.b_q),
                (&dk, &lw.w_k, &mut gl.w_k, &mut gl.b_k),
                (&dv, &lw.w_v, &mut gl.w_v, &mut gl.b_v),
            ] {
                col_sum_into(grad, &mut gb[h * dh..(h + 1) * dh]);
                gemm(
                    1.0,
                    st.y1.view().t(),
                    grad.view(),
                    0.0,
                    ViewMut::block(gw, h * d * dh, d, dh),
                );
                gemm(
                    1.0,
                    grad.view(),
                    View::block(w, h * d * dh, d, dh).t(),
                    1.0,
                    dy1.view_mut(),
                );
            }
        }
        let dx1 = ln_back(&dy1, &lw.ln1_g, &st.ln1, &mut gl.ln1_g, &mut gl.ln1_b);
        crate::tensor::add_assign(&mut dx.data, &dx1.data);
    }

    for &(off, len) in &pk.seqs {
        for t in 0..len {
            let tok = pk.tokens[off + t] as usize;
            let row = dx.row(off + t);
            for k in 0..d {
                g.tok_emb[tok * d + k] += row[k];
                g.pos_emb[t * d + k] += row[k];
            }
        }
    }
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Activation, InterventionPlan, Prompt};

    fn spec() -> ModelSpec {
        ModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 10,
            max_seq: 6,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        }
    }

    fn batch() -> Vec<Example> {
        [(vec![0, 3, 4, 9], 2), (vec![1, 2, 5], 7), (vec![0, 8, 8, 1, 6, 2], 9)]
            .into_iter()
            .map(|(tokens, target)| Example {
                tokens,
                target,
                rating: None,
                task: TaskKind::Knowledge,
            })
            .collect()
    }

    #[test]
    fn packed_logits_match_the_analysis_forward() {
        let m = Weights::init_with_std(&spec(), 1, 0.4).unwrap().compile();
        let b = batch();
        let packed = packed_final_logits(&m, &b).unwrap();
        for (e, row) in b.iter().zip(&packed) {
            let l = forward(&m, &Prompt::Tokens(e.tokens.clone()), &InterventionPlan::new()).unwrap();
            for (a, c) in row.iter().zip(l.row(l.rows - 1)) {
                assert!((a - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut m = Weights::init_with_std(&spec(), 2, 0.4).unwrap().compile();
        let b = batch();
        let refs: Vec<&Example> = b.iter().collect();
        let (_, g) = loss_and_grad(&m, &refs).unwrap();
        let gs: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-5;
        for (ti, grad) in gs.iter().enumerate() {
            for idx in [0, grad.len() / 2, grad.len() - 1] {
                let orig = m.p.slices()[ti][idx];
                m.p.slices_mut()[ti][idx] = orig + h;
                let up = loss_and_grad(&m, &refs).unwrap().0;
                m.p.slices_mut()[ti][idx] = orig - h;
                let dn = loss_and_grad(&m, &refs).unwrap().0;
                m.p.slices_mut()[ti][idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
                assert!(err < 1e-4, "tensor {ti} idx {idx}: fd {fd} vs {}", grad[idx]);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged_and_runs_are_seeded() {
        let data = batch();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            lr: 0.0,
            seed: 4,
            ..TrainConfig::default()
        };
        let r = train(&spec(), &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(r.weights, Weights::init_with_std(&spec(), 4, cfg.init_std).unwrap());
        let cfg = TrainConfig { lr: 1e-2, ..cfg };
        let a = train(&spec(), &data, &cfg, |_, _| {}).unwrap();
        let b = train(&spec(), &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_ne!(a.weights, r.weights);
    }

    #[test]
    fn divergence_reports_the_last_stable_weights() {
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            lr: f64::MAX,
            seed: 1,
            ..TrainConfig::default()
        };
        match train(&spec(), &batch(), &cfg, |_, _| {}) {
            Err(Error::Diverged { last_stable, .. }) => assert!(last_stable.is_finite()),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.losses)),
        }
    }
}
