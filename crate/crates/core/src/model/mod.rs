// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small pre-LayerNorm decoder-only transformer with per-head decomposed attention.
//!
//! The forward pass records every node's residual-stream contribution and every
//! receiver's read-point input, so attribution and patching code can address
//! the model as a graph of senders (embeddings, heads, MLPs) and receivers
//! (heads, MLPs, logits). Two backward modes share one implementation: exact
//! reverse-mode gradients and LRP-style rule substitution.

mod backward;
mod checkpoint;
mod forward;
mod plan;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{
    backward, backward_gradients, lrp_backward, BackwardRules, BilinearRule, GradCache, LnRule, LrpRules,
    NonlinearityRule,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub(crate) use forward::{activate, activation_grad, layer_norm};
pub use forward::{embed_tokens, forward, forward_with_cache, ActivationCache, HeadCache, LnCache, MlpCache, Prompt};
pub use plan::{Action, InterventionPlan};
pub use weights::{LayerTensors, Tensors, Transformer, Weights};

/// Elementwise MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh-approximated GELU.
    #[default]
    Gelu,
    /// Pass-through; makes the MLP affine. Used for linear-regime checks.
    Identity,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ln_epsilon: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be >= 2".into()));
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return Err(Error::Config("ln_epsilon must be a positive finite number".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) != n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }

    /// Number of components including `Embed` and `Logits`.
    pub fn n_components(&self) -> usize {
        self.n_layers * (self.n_heads + 1) + 2
    }

    /// Position of a component in the canonical (topological) order.
    ///
    /// Embeddings come first, then each layer's heads followed by its MLP, then logits.
    /// Residual-stream sums are always accumulated in this order.
    pub fn index_of(&self, c: Component) -> usize {
        let stride = self.n_heads + 1;
        match c {
            Component::Embed => 0,
            Component::Head { layer, head } => 1 + layer * stride + head,
            Component::Mlp { layer } => 1 + layer * stride + self.n_heads,
            Component::Logits => 1 + self.n_layers * stride,
        }
    }

    pub fn component_at(&self, idx: usize) -> Component {
        let stride = self.n_heads + 1;
        if idx == 0 {
            Component::Embed
        } else if idx == 1 + self.n_layers * stride {
            Component::Logits
        } else {
            let layer = (idx - 1) / stride;
            let within = (idx - 1) % stride;
            if within == self.n_heads {
                Component::Mlp { layer }
            } else {
                Component::Head { layer, head: within }
            }
        }
    }

    pub fn contains(&self, c: Component) -> bool {
        match c {
            Component::Embed | Component::Logits => true,
            Component::Head { layer, head } => layer < self.n_layers && head < self.n_heads,
            Component::Mlp { layer } => layer < self.n_layers,
        }
    }

    pub fn check_component(&self, c: Component) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::UnknownNode(c.to_string()))
        }
    }

    /// Exclusive end (canonical index) of the senders feeding receiver `c`.
    ///
    /// Heads in one layer read the same residual snapshot and so do not feed each other.
    pub fn upstream_end(&self, c: Component) -> usize {
        match c {
            Component::Head { layer, .. } => 1 + layer * (self.n_heads + 1),
            other => self.index_of(other),
        }
    }

    /// Senders (components with a residual contribution), canonical order.
    pub fn senders(&self) -> impl Iterator<Item = Component> + '_ {
        (0..self.n_components() - 1).map(|i| self.component_at(i))
    }

    /// Receivers (components that read the residual stream), canonical order.
    pub fn receivers(&self) -> impl Iterator<Item = Component> + '_ {
        (1..self.n_components()).map(|i| self.component_at(i))
    }

    /// All heads and MLPs in canonical order.
    pub fn internal_components(&self) -> impl Iterator<Item = Component> + '_ {
        (1..self.n_components() - 1).map(|i| self.component_at(i))
    }

    /// Number of parameters.
    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d
            + 3 * self.n_heads * (d * self.d_head + self.d_head)
            + self.n_heads * self.d_head * d
            + d * self.d_mlp
            + self.d_mlp
            + self.d_mlp * d
            + d;
        self.vocab_size * d + self.max_seq * d + self.n_layers * per_layer + 2 * d + d * self.vocab_size
    }
}

/// A node of the computation graph, independent of position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl Component {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            Component::Head { layer, .. } | Component::Mlp { layer } => Some(layer),
            _ => None,
        }
    }

    pub fn head(&self) -> Option<usize> {
        match *self {
            Component::Head { head, .. } => Some(head),
            _ => None,
        }
    }

    /// Layer on an axis extended with `Embed = -1` and `Logits = n_layers`.
    pub fn depth(&self, n_layers: usize) -> i64 {
        match *self {
            Component::Embed => -1,
            Component::Logits => n_layers as i64,
            Component::Head { layer, .. } | Component::Mlp { layer } => layer as i64,
        }
    }

    pub fn is_sender(&self) -> bool {
        !matches!(self, Component::Logits)
    }

    pub fn is_receiver(&self) -> bool {
        !matches!(self, Component::Embed)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Embed => write!(f, "embed"),
            Component::Head { layer, head } => write!(f, "L{layer}H{head}"),
            Component::Mlp { layer } => write!(f, "MLP{layer}"),
            Component::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownNode(s.to_string());
        match s {
            "embed" => return Ok(Component::Embed),
            "logits" => return Ok(Component::Logits),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("MLP") {
            let layer = rest.parse().map_err(|_| bad())?;
            return Ok(Component::Mlp { layer });
        }
        if let Some(rest) = s.strip_prefix('L') {
            let (l, h) = rest.split_once('H').ok_or_else(bad)?;
            return Ok(Component::Head {
                layer: l.parse().map_err(|_| bad())?,
                head: h.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

/// A component at a token position. Negative positions count from the end
/// (`-1` is the final token).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub component: Component,
    pub position: i64,
}

impl NodeRef {
    pub fn new(component: Component, position: i64) -> Self {
        Self { component, position }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.component, self.position)
    }
}

/// Resolve a signed position against a sequence length.
pub fn resolve_position(position: i64, len: usize) -> Result<usize> {
    let resolved = if position < 0 { len as i64 + position } else { position };
    if resolved < 0 || resolved >= len as i64 {
        return Err(Error::PositionOutOfRange { position, len });
    }
    Ok(resolved as usize)
}

/// Right-aligned (negative) index of absolute position `t`.
pub fn right_aligned(t: usize, len: usize) -> i64 {
    t as i64 - len as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(layers: usize, heads: usize) -> ModelSpec {
        ModelSpec {
            n_layers: layers,
            n_heads: heads,
            d_model: 4 * heads,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_seq: 8,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn canonical_index_round_trips() {
        let s = spec(3, 2);
        for i in 0..s.n_components() {
            assert_eq!(s.index_of(s.component_at(i)), i);
        }
        assert_eq!(s.component_at(0), Component::Embed);
        assert_eq!(s.component_at(s.n_components() - 1), Component::Logits);
        assert_eq!(s.component_at(3), Component::Mlp { layer: 0 });
    }

    #[test]
    fn heads_in_a_layer_share_their_upstream() {
        let s = spec(2, 3);
        let h0 = Component::Head { layer: 1, head: 0 };
        let h2 = Component::Head { layer: 1, head: 2 };
        assert_eq!(s.upstream_end(h0), s.upstream_end(h2));
        assert_eq!(s.upstream_end(h0), s.index_of(h0));
        let mlp = Component::Mlp { layer: 1 };
        assert_eq!(s.upstream_end(mlp), s.index_of(h2) + 1);
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        let mut s = spec(1, 2);
        assert!(s.validate().is_ok());
        s.d_head = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = spec(1, 1);
        s.max_seq = 1;
        assert!(s.validate().is_err());
        let mut s = spec(1, 1);
        s.ln_epsilon = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn component_display_parses_back() {
        for c in [
            Component::Embed,
            Component::Logits,
            Component::Head { layer: 3, head: 11 },
            Component::Mlp { layer: 7 },
        ] {
            assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
        }
        assert!("L3".parse::<Component>().is_err());
    }

    #[test]
    fn signed_positions_resolve() {
        assert_eq!(resolve_position(-1, 20).unwrap(), 19);
        assert_eq!(resolve_position(-20, 20).unwrap(), 0);
        assert_eq!(resolve_position(3, 20).unwrap(), 3);
        assert!(resolve_position(-21, 20).is_err());
        assert!(resolve_position(20, 20).is_err());
        assert_eq!(right_aligned(19, 20), -1);
    }
}
