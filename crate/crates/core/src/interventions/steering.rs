// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::PairRun;
use crate::error::{Error, Result};
use crate::metrics::{expected_rating, RatingScale};
use crate::model::{forward, resolve_position, InterventionPlan, NodeRef, Prompt, Transformer};
use crate::tasks::derive_seed;
use crate::tensor::norm;

/// Default steering strengths.
pub const DEFAULT_ALPHAS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookVector {
    pub node: NodeRef,
    pub vector: Vec<f64>,
    pub norm: f64,
}

/// Mean polarity-oriented clean-minus-corrupt output at each hook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringBundle {
    pub hooks: Vec<HookVector>,
    pub source_task: String,
    pub n_pairs: usize,
}

impl SteeringBundle {
    pub fn mean_norm(&self) -> f64 {
        self.hooks.iter().map(|h| h.norm).sum::<f64>() / self.hooks.len().max(1) as f64
    }

    /// The same bundle with every vector negated.
    pub fn negated(&self) -> Self {
        let mut b = self.clone();
        for h in &mut b.hooks {
            h.vector.iter_mut().for_each(|x| *x = -*x);
        }
        b
    }
}

/// `v = mean_i m_i (a_clean_i - a_corr_i)` at each hook, with `m_i` the pair polarity.
pub fn steering_vectors(runs: &[PairRun], hooks: &[NodeRef], source_task: &str) -> Result<SteeringBundle> {
    if hooks.is_empty() {
        return Err(Error::Config("steering needs at least one hook".into()));
    }
    if runs.is_empty() {
        return Err(Error::InsufficientData("steering needs at least one pair".into()));
    }
    let mut out = Vec::with_capacity(hooks.len());
    for &node in hooks {
        let mut v: Option<Vec<f64>> = None;
        for run in runs {
            let m = run.polarity()?;
            let a = run.clean_cache.node_output(node)?;
            let b = run.corrupt_cache.node_output(node)?;
            let acc = v.get_or_insert_with(|| vec![0.0; a.len()]);
            for ((x, p), q) in acc.iter_mut().zip(a).zip(b) {
                *x += m * (p - q);
            }
        }
        let mut v = v.expect("at least one run");
        let n = runs.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("steering vector at {node}")));
        }
        out.push(HookVector {
            node,
            norm: norm(&v),
            vector: v,
        });
    }
    Ok(SteeringBundle {
        hooks: out,
        source_task: source_task.to_string(),
        n_pairs: runs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerOutput {
    pub ev: f64,
    pub distribution: Vec<f64>,
}

fn rotate(r: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (r * DVector::from_column_slice(v)).as_slice().to_vec()
}

/// Forward with `alpha * R v` added at every hook (`R = I` when `rotation` is `None`).
/// Hooks whose position does not exist in the prompt are skipped.
pub fn steer_rotated(
    model: &Transformer,
    prompt: &Prompt,
    bundle: &SteeringBundle,
    alpha: f64,
    rotation: Option<&DMatrix<f64>>,
    scale: &RatingScale,
) -> Result<SteerOutput> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite(format!("alpha = {alpha}")));
    }
    let mut plan = InterventionPlan::new();
    if alpha != 0.0 {
        for h in &bundle.hooks {
            if resolve_position(h.node.position, prompt.len()).is_err() {
                continue;
            }
            let v = match rotation {
                Some(r) => rotate(r, &h.vector),
                None => h.vector.clone(),
            };
            plan = plan.add(h.node, v, alpha);
        }
    }
    let logits = forward(model, prompt, &plan)?;
    let row = logits.row(logits.rows - 1);
    Ok(SteerOutput {
        ev: expected_rating(row, scale)?,
        distribution: scale.distribution(row)?,
    })
}

pub fn steer(
    model: &Transformer,
    prompt: &Prompt,
    bundle: &SteeringBundle,
    alpha: f64,
    scale: &RatingScale,
) -> Result<SteerOutput> {
    steer_rotated(model, prompt, bundle, alpha, None, scale)
}

/// Haar-uniform orthogonal matrix: QR of a standard-normal matrix with the signs of
/// `diag(R)` folded into `Q`.
pub fn haar_rotation(d: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `EV(steered with R v) - EV(unsteered)` for `n` independent Haar rotations.
pub fn random_rotation_control(
    model: &Transformer,
    prompt: &Prompt,
    bundle: &SteeringBundle,
    alpha: f64,
    n: usize,
    seed: u64,
    scale: &RatingScale,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("rotation control needs n >= 1".into()));
    }
    let base = steer(model, prompt, bundle, 0.0, scale)?.ev;
    (0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
            let r = haar_rotation(model.spec.d_model, &mut rng);
            Ok(steer_rotated(model, prompt, bundle, alpha, Some(&r), scale)?.ev - base)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::prepare_pair;
    use crate::model::{Activation, Component, ModelSpec, Weights};

    fn setup() -> (Transformer, Vec<PairRun>, RatingScale) {
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
        let m = Weights::init_with_std(&spec, 6, 0.5).unwrap().compile();
        let scale = RatingScale::new(vec![7, 8, 9, 10, 11]).unwrap();
        let runs = vec![
            prepare_pair(&m, &vec![0u32, 1, 2].into(), &vec![0u32, 3, 4].into(), &scale).unwrap(),
            prepare_pair(&m, &vec![0u32, 5, 2].into(), &vec![0u32, 6, 1].into(), &scale).unwrap(),
        ];
        (m, runs, scale)
    }

    fn hooks() -> Vec<NodeRef> {
        vec![
            NodeRef::new(Component::Mlp { layer: 0 }, -1),
            NodeRef::new(Component::Head { layer: 1, head: 0 }, -1),
        ]
    }

    #[test]
    fn single_pair_vector_is_the_oriented_difference() {
        let (_, runs, _) = setup();
        let b = steering_vectors(&runs[..1], &hooks(), "t").unwrap();
        let m = runs[0].polarity().unwrap();
        let a = runs[0].clean_cache.node_output(hooks()[0]).unwrap();
        let c = runs[0].corrupt_cache.node_output(hooks()[0]).unwrap();
        for ((v, x), y) in b.hooks[0].vector.iter().zip(a).zip(c) {
            assert_eq!(*v, m * (x - y));
        }
        let same = vec![runs[0].clone(); 1];
        let mut same = same;
        same[0].corrupt_cache = same[0].clean_cache.clone();
        same[0].ev_corrupt = same[0].ev_clean - 1.0;
        let z = steering_vectors(&same, &hooks(), "t").unwrap();
        assert!(z.hooks.iter().all(|h| h.vector.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn alpha_zero_and_identity_rotation_are_exact() {
        let (m, runs, scale) = setup();
        let b = steering_vectors(&runs, &hooks(), "t").unwrap();
        let p: Prompt = vec![0u32, 4, 2].into();
        let base = forward(&m, &p, &InterventionPlan::new()).unwrap();
        let s0 = steer(&m, &p, &b, 0.0, &scale).unwrap();
        assert_eq!(s0.ev, expected_rating(base.row(2), &scale).unwrap());
        let id = DMatrix::<f64>::identity(8, 8);
        assert_eq!(
            steer_rotated(&m, &p, &b, 1.5, Some(&id), &scale).unwrap(),
            steer(&m, &p, &b, 1.5, &scale).unwrap()
        );
        assert!(steer(&m, &p, &b, f64::NAN, &scale).is_err());
    }

    #[test]
    fn rotations_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = haar_rotation(16, &mut rng);
        let err = (&r.transpose() * &r - DMatrix::<f64>::identity(16, 16)).abs().max();
        assert!(err < 1e-12);
        let v: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        assert!((norm(&rotate(&r, &v)) - norm(&v)).abs() < 1e-9);
    }
}
