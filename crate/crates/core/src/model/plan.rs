// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use super::{resolve_position, Component, ModelSpec, NodeRef};
use crate::error::{Error, Result};

/// One forward-pass modification.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Clamp a sender's output to zero at every position.
    Zero { component: Component },
    /// Replace a sender's output at one position.
    Patch { node: NodeRef, value: Vec<f64> },
    /// Add `scale * vector` to a sender's output at one position (after any Zero/Patch).
    Add {
        node: NodeRef,
        vector: Vec<f64>,
        scale: f64,
    },
    /// Edge-level patch: `receiver` sees `value` in place of `sender`'s output at the
    /// receiver's position. Other receivers still see the sender's actual output.
    SubstituteSender {
        receiver: NodeRef,
        sender: Component,
        value: Vec<f64>,
    },
    /// Cross-position edge patch: destination `dst` of a head mixes `value` in place of
    /// the value vector at `src`. The attention row keeps its natural weights unless
    /// `key` is given, in which case the row is recomputed with that key at `src`.
    SubstituteValue {
        layer: usize,
        head: usize,
        src: i64,
        dst: i64,
        value: Vec<f64>,
        key: Option<Vec<f64>>,
    },
}

/// Ordered list of actions applied during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionPlan {
    pub actions: Vec<Action>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, action: Action) -> &mut Self {
        self.actions.push(action);
        self
    }

    pub fn zero(mut self, component: Component) -> Self {
        self.actions.push(Action::Zero { component });
        self
    }

    pub fn patch(mut self, node: NodeRef, value: Vec<f64>) -> Self {
        self.actions.push(Action::Patch { node, value });
        self
    }

    pub fn add(mut self, node: NodeRef, vector: Vec<f64>, scale: f64) -> Self {
        self.actions.push(Action::Add { node, vector, scale });
        self
    }

    /// Validate against a model and sequence length and index by site.
    pub(crate) fn resolve(&self, spec: &ModelSpec, len: usize) -> Result<ResolvedPlan> {
        let n_senders = spec.n_components() - 1;
        let mut out = ResolvedPlan {
            base: vec![vec![Base::Natural; len]; n_senders],
            adds: vec![vec![Vec::new(); len]; n_senders],
            sender_subs: BTreeMap::new(),
            value_subs: BTreeMap::new(),
            any: !self.actions.is_empty(),
        };
        let check_dim = |v: &[f64], expected: usize| {
            if v.len() != expected {
                return Err(Error::DimensionMismatch { expected, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("intervention vector".into()));
            }
            Ok(())
        };
        let sender_index = |c: Component| -> Result<usize> {
            spec.check_component(c)?;
            if !c.is_sender() {
                return Err(Error::UnknownNode(format!("{c} is not a sender")));
            }
            Ok(spec.index_of(c))
        };
        let mut set_base = |s: usize, t: usize, b: Base, site: String| {
            if out.base[s][t] != Base::Natural {
                return Err(Error::ConflictingIntervention(site));
            }
            out.base[s][t] = b;
            Ok(())
        };
        let mut adds = Vec::new();
        for action in &self.actions {
            match action {
                Action::Zero { component } => {
                    let s = sender_index(*component)?;
                    for t in 0..len {
                        set_base(s, t, Base::Zero, format!("{component}@{t}"))?;
                    }
                }
                Action::Patch { node, value } => {
                    let s = sender_index(node.component)?;
                    let t = resolve_position(node.position, len)?;
                    check_dim(value, spec.d_model)?;
                    set_base(s, t, Base::Patch(value.clone()), node.to_string())?;
                }
                Action::Add { node, vector, scale } => {
                    let s = sender_index(node.component)?;
                    let t = resolve_position(node.position, len)?;
                    check_dim(vector, spec.d_model)?;
                    if !scale.is_finite() {
                        return Err(Error::NonFinite("steering scale".into()));
                    }
                    adds.push((s, t, vector.clone(), *scale));
                }
                Action::SubstituteSender {
                    receiver,
                    sender,
                    value,
                } => {
                    spec.check_component(receiver.component)?;
                    if !receiver.component.is_receiver() {
                        return Err(Error::UnknownNode(format!("{} is not a receiver", receiver.component)));
                    }
                    let s = sender_index(*sender)?;
                    if s >= spec.upstream_end(receiver.component) {
                        return Err(Error::UnknownNode(format!(
                            "{sender} is not upstream of {}",
                            receiver.component
                        )));
                    }
                    let t = resolve_position(receiver.position, len)?;
                    check_dim(value, spec.d_model)?;
                    let r = spec.index_of(receiver.component);
                    if out.sender_subs.insert((r, t, s), value.clone()).is_some() {
                        return Err(Error::ConflictingIntervention(format!("{sender}->{receiver}")));
                    }
                }
                Action::SubstituteValue {
                    layer,
                    head,
                    src,
                    dst,
                    value,
                    key,
                } => {
                    let c = Component::Head {
                        layer: *layer,
                        head: *head,
                    };
                    spec.check_component(c)?;
                    let i = resolve_position(*src, len)?;
                    let j = resolve_position(*dst, len)?;
                    if i > j {
                        return Err(Error::UnknownNode(format!(
                            "{c} cross edge {src}->{dst} violates the causal mask"
                        )));
                    }
                    check_dim(value, spec.d_head)?;
                    if let Some(k) = key {
                        check_dim(k, spec.d_head)?;
                    }
                    let slot = (layer * spec.n_heads + head, j, i);
                    if out.value_subs.insert(slot, (value.clone(), key.clone())).is_some() {
                        return Err(Error::ConflictingIntervention(format!("{c} {src}->{dst}")));
                    }
                }
            }
        }
        for (s, t, v, a) in adds {
            out.adds[s][t].push((v, a));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Base {
    Natural,
    Zero,
    Patch(Vec<f64>),
}

/// Plan indexed by site. Sender indices are canonical; `t` is absolute.
#[derive(Debug, Clone)]
pub(crate) struct ResolvedPlan {
    /// `[sender][t]`
    pub base: Vec<Vec<Base>>,
    /// `[sender][t]`
    pub adds: Vec<Vec<Vec<(Vec<f64>, f64)>>>,
    /// `(receiver, t, sender) -> value`
    pub sender_subs: BTreeMap<(usize, usize, usize), Vec<f64>>,
    /// `(flat head, dst, src) -> (value, key)`
    pub value_subs: BTreeMap<(usize, usize, usize), (Vec<f64>, Option<Vec<f64>>)>,
    pub any: bool,
}

impl ResolvedPlan {
    /// Apply Zero/Patch then Adds to a sender's output. Returns per-row "frozen" flags:
    /// rows whose value no longer depends on the sender's inputs.
    pub fn apply_sender(&self, s: usize, out: &mut crate::tensor::Mat) -> Vec<bool> {
        let mut frozen = vec![false; out.rows];
        if !self.any {
            return frozen;
        }
        for t in 0..out.rows {
            match &self.base[s][t] {
                Base::Natural => {}
                Base::Zero => {
                    out.row_mut(t).fill(0.0);
                    frozen[t] = true;
                }
                Base::Patch(v) => {
                    out.row_mut(t).copy_from_slice(v);
                    frozen[t] = true;
                }
            }
            for (v, a) in &self.adds[s][t] {
                crate::tensor::axpy(*a, v, out.row_mut(t));
            }
        }
        frozen
    }

    pub fn receiver_has_subs(&self, r: usize) -> bool {
        self.sender_subs.range((r, 0, 0)..(r + 1, 0, 0)).next().is_some()
    }

    pub fn has_edge_substitutions(&self) -> bool {
        !self.sender_subs.is_empty() || !self.value_subs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn spec() -> ModelSpec {
        ModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_head: 2,
            d_mlp: 8,
            vocab_size: 10,
            max_seq: 8,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn double_patch_conflicts() {
        let n = NodeRef::new(Component::Mlp { layer: 0 }, -1);
        let plan = InterventionPlan::new().patch(n, vec![0.0; 4]).patch(n, vec![1.0; 4]);
        assert!(matches!(
            plan.resolve(&spec(), 5),
            Err(Error::ConflictingIntervention(_))
        ));
        let plan = InterventionPlan::new()
            .zero(Component::Mlp { layer: 0 })
            .patch(n, vec![1.0; 4]);
        assert!(matches!(
            plan.resolve(&spec(), 5),
            Err(Error::ConflictingIntervention(_))
        ));
    }

    #[test]
    fn adds_compose_after_patch() {
        let n = NodeRef::new(Component::Head { layer: 1, head: 0 }, 0);
        let plan = InterventionPlan::new().add(n, vec![1.0; 4], 2.0).patch(n, vec![5.0; 4]);
        let r = plan.resolve(&spec(), 3).unwrap();
        let s = spec().index_of(n.component);
        let mut m = crate::tensor::Mat::zeros(3, 4);
        m.fill(9.0);
        let frozen = r.apply_sender(s, &mut m);
        assert_eq!(m.row(0), &[7.0; 4]);
        assert_eq!(m.row(1), &[9.0; 4]);
        assert_eq!(frozen, vec![true, false, false]);
    }

    #[test]
    fn rejects_bad_sites() {
        let s = spec();
        let bad = [
            InterventionPlan::new().zero(Component::Logits),
            InterventionPlan::new().zero(Component::Mlp { layer: 2 }),
            InterventionPlan::new().patch(NodeRef::new(Component::Embed, 5), vec![0.0; 4]),
            InterventionPlan::new().patch(NodeRef::new(Component::Embed, 0), vec![0.0; 3]),
        ];
        for p in bad {
            assert!(p.resolve(&s, 5).is_err(), "{p:?}");
        }
        let mut p = InterventionPlan::new();
        p.push(Action::SubstituteSender {
            receiver: NodeRef::new(Component::Head { layer: 0, head: 1 }, -1),
            sender: Component::Head { layer: 0, head: 0 },
            value: vec![0.0; 4],
        });
        assert!(p.resolve(&s, 5).is_err());
        let mut p = InterventionPlan::new();
        p.push(Action::SubstituteValue {
            layer: 0,
            head: 0,
            src: -1,
            dst: -2,
            value: vec![0.0; 2],
            key: None,
        });
        assert!(p.resolve(&s, 5).is_err());
    }
}
