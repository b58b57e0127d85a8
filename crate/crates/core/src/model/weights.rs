// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelSpec;
use crate::error::{Error, Result};

/// Per-layer parameter tensors.
///
/// Per-head projections are stored head-major: `w_q` is `[n_heads, d_model, d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    pub w_q: Vec<T>,
    pub b_q: Vec<T>,
    pub w_k: Vec<T>,
    pub b_k: Vec<T>,
    pub w_v: Vec<T>,
    pub b_v: Vec<T>,
    pub w_o: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w_in: Vec<T>,
    pub b_in: Vec<T>,
    pub w_out: Vec<T>,
    pub b_out: Vec<T>,
}

/// Every parameter tensor of a model, generic over the element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors<T> {
    pub tok_emb: Vec<T>,
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerTensors<T>>,
    pub ln_f_g: Vec<T>,
    pub ln_f_b: Vec<T>,
    pub w_u: Vec<T>,
}

/// Name and shape of every tensor, in serialization order.
pub(crate) fn tensor_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let (d, h, dh, dm) = (spec.d_model, spec.n_heads, spec.d_head, spec.d_mlp);
    let mut out = vec![
        ("tok_emb".to_string(), vec![spec.vocab_size, d]),
        ("pos_emb".to_string(), vec![spec.max_seq, d]),
    ];
    for l in 0..spec.n_layers {
        let p = |n: &str| format!("blocks.{l}.{n}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.w_q"), vec![h, d, dh]),
            (p("attn.b_q"), vec![h, dh]),
            (p("attn.w_k"), vec![h, d, dh]),
            (p("attn.b_k"), vec![h, dh]),
            (p("attn.w_v"), vec![h, d, dh]),
            (p("attn.b_v"), vec![h, dh]),
            (p("attn.w_o"), vec![h, dh, d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w_in"), vec![d, dm]),
            (p("mlp.b_in"), vec![dm]),
            (p("mlp.w_out"), vec![dm, d]),
            (p("mlp.b_out"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_f.g".to_string(), vec![d]),
        ("ln_f.b".to_string(), vec![d]),
        ("w_u".to_string(), vec![d, spec.vocab_size]),
    ]);
    out
}

impl<T: Copy> Tensors<T> {
    pub fn filled(spec: &ModelSpec, value: T) -> Self {
        let mut shapes = tensor_shapes(spec)
            .into_iter()
            .map(|(_, s)| s.iter().product::<usize>());
        let mut next = || vec![value; shapes.next().expect("shape list")];
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..spec.n_layers)
            .map(|_| LayerTensors {
                ln1_g: next(),
                ln1_b: next(),
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                ln2_g: next(),
                ln2_b: next(),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            ln_f_g: next(),
            ln_f_b: next(),
            w_u: next(),
        }
    }

    /// Tensors in serialization order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g[..],
                &l.ln1_b,
                &l.w_q,
                &l.b_q,
                &l.w_k,
                &l.b_k,
                &l.w_v,
                &l.b_v,
                &l.w_o,
                &l.ln2_g,
                &l.ln2_b,
                &l.w_in,
                &l.b_in,
                &l.w_out,
                &l.b_out,
            ]);
        }
        out.extend([&self.ln_f_g[..], &self.ln_f_b, &self.w_u]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w_q,
                &mut l.b_q,
                &mut l.w_k,
                &mut l.b_k,
                &mut l.w_v,
                &mut l.b_v,
                &mut l.w_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w_in,
                &mut l.b_in,
                &mut l.w_out,
                &mut l.b_out,
            ]);
        }
        out.extend([&mut self.ln_f_g, &mut self.ln_f_b, &mut self.w_u]);
        out
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Tensors<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| f(x)).collect::<Vec<U>>();
        Tensors {
            tok_emb: conv(&self.tok_emb),
            pos_emb: conv(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTensors {
                    ln1_g: conv(&l.ln1_g),
                    ln1_b: conv(&l.ln1_b),
                    w_q: conv(&l.w_q),
                    b_q: conv(&l.b_q),
                    w_k: conv(&l.w_k),
                    b_k: conv(&l.b_k),
                    w_v: conv(&l.w_v),
                    b_v: conv(&l.b_v),
                    w_o: conv(&l.w_o),
                    ln2_g: conv(&l.ln2_g),
                    ln2_b: conv(&l.ln2_b),
                    w_in: conv(&l.w_in),
                    b_in: conv(&l.b_in),
                    w_out: conv(&l.w_out),
                    b_out: conv(&l.b_out),
                })
                .collect(),
            ln_f_g: conv(&self.ln_f_g),
            ln_f_b: conv(&self.ln_f_b),
            w_u: conv(&self.w_u),
        }
    }
}

/// Stored model weights (`f32`, the checkpoint precision).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub spec: ModelSpec,
    pub tensors: Tensors<f32>,
}

impl Weights {
    /// All-zero weights (LayerNorm gains included).
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            tensors: Tensors::filled(spec, 0.0),
        })
    }

    /// GPT-2 style initialization: N(0, 0.02) matrices, residual-output projections
    /// scaled by `1/sqrt(2 n_layers)`, unit LayerNorm gains, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::init_with_std(spec, seed, 0.02)
    }

    pub fn init_with_std(spec: &ModelSpec, seed: u64, std: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let resid =
            Normal::new(0.0, std / (2.0 * spec.n_layers as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let mut t = Tensors::filled(spec, 0.0f32);
        let mut fill = |v: &mut Vec<f32>, dist: &Normal<f64>| {
            for x in v.iter_mut() {
                *x = dist.sample(&mut rng) as f32;
            }
        };
        fill(&mut t.tok_emb, &normal);
        fill(&mut t.pos_emb, &normal);
        for l in &mut t.layers {
            l.ln1_g.iter_mut().for_each(|g| *g = 1.0);
            l.ln2_g.iter_mut().for_each(|g| *g = 1.0);
            fill(&mut l.w_q, &normal);
            fill(&mut l.w_k, &normal);
            fill(&mut l.w_v, &normal);
            fill(&mut l.w_o, &resid);
            fill(&mut l.w_in, &normal);
            fill(&mut l.w_out, &resid);
        }
        t.ln_f_g.iter_mut().for_each(|g| *g = 1.0);
        fill(&mut t.w_u, &normal);
        Ok(Self {
            spec: spec.clone(),
            tensors: t,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Little-endian bytes of every tensor, in serialization order.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.spec.n_params() * 4);
        for s in self.tensors.slices() {
            for x in s {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the spec JSON and tensor payload; identifies a model in run manifests.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        h.update(self.payload_bytes());
        hex::encode(h.finalize())
    }

    /// `f64` view ready for forward/backward passes.
    pub fn compile(&self) -> Transformer {
        Transformer {
            spec: self.spec.clone(),
            p: self.tensors.map(f64::from),
        }
    }
}

/// Model in compute precision. Immutable; forward/backward are pure functions of it.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub spec: ModelSpec,
    pub p: Tensors<f64>,
}

impl Transformer {
    pub fn from_weights(w: &Weights) -> Self {
        w.compile()
    }

    /// Round back to storage precision.
    pub fn to_weights(&self) -> Weights {
        Weights {
            spec: self.spec.clone(),
            tensors: self.p.map(|x| x as f32),
        }
    }
}
