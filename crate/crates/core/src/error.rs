// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module.

use std::path::PathBuf;

use crate::model::Weights;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A model or task configuration violates its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A token id outside `[0, vocab_size)`.
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    /// Input longer than the positional table.
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    /// An intervention or edge references a node that does not exist.
    #[error("unknown node: {0}")]
    UnknownNode(String),

    /// Position that does not resolve inside the sequence.
    #[error("position {position} does not resolve in a sequence of length {len}")]
    PositionOutOfRange { position: i64, len: usize },

    /// Two Zero/Patch actions target the same (component, position).
    #[error("conflicting interventions at {0}")]
    ConflictingIntervention(String),

    /// Vector argument with the wrong dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Numeric blowup during a backward pass.
    #[error("non-finite gradient at {node}")]
    NonFiniteGradient { node: String },

    /// Non-finite values in an input vector.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// An LRP rule site was left without a rule.
    #[error("no rule assigned for LRP site `{0}`")]
    UnassignedRuleSite(&'static str),

    /// Clean and corrupted runs produce the same metric (or too close to it).
    #[error("degenerate pair: |EV gap| = {gap} below threshold {threshold}")]
    DegeneratePair { gap: f64, threshold: f64 },

    /// Rank correlation or similar statistic undefined for the input.
    #[error("undefined statistic: {0}")]
    Undefined(String),

    /// Not enough data for the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Malformed checkpoint header.
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    /// Tensor shape in a checkpoint disagrees with its model spec.
    #[error("shape mismatch for tensor `{name}`: manifest {manifest:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        manifest: Vec<usize>,
        expected: Vec<usize>,
    },

    /// Checkpoint payload shorter than the manifest declares.
    #[error("truncated payload: need {needed} bytes, found {found}")]
    TruncatedPayload { needed: usize, found: usize },

    /// Training loss went non-finite. Carries the last weights with a finite loss.
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_stable: Box<Weights> },

    /// A referenced input file does not exist.
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// An output directory that already holds files.
    #[error("output directory {} is not empty; outputs are write-once", .0.display())]
    OutputExists(PathBuf),

    /// A rerun produced different bytes than its manifest recorded.
    #[error("irreproducible output: {0}")]
    Irreproducible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code and a short kind tag for the command-line tool.
    ///
    /// 1: bad configuration or arguments; 2: a missing or unreadable artifact;
    /// 3: a numeric failure or an irreproducible result.
    pub fn exit_code(&self) -> (i32, &'static str) {
        use Error::*;
        match self {
            Config(_) => (1, "config"),
            TokenOutOfRange { .. } => (1, "token_out_of_range"),
            SequenceTooLong { .. } => (1, "sequence_too_long"),
            UnknownNode(_) => (1, "unknown_node"),
            PositionOutOfRange { .. } => (1, "position_out_of_range"),
            ConflictingIntervention(_) => (1, "conflicting_intervention"),
            DimensionMismatch { .. } => (1, "dimension_mismatch"),
            UnassignedRuleSite(_) => (1, "unassigned_rule_site"),
            OutputExists(_) => (1, "output_exists"),
            MissingArtifact(_) => (2, "missing_artifact"),
            MalformedCheckpoint(_) => (2, "malformed_checkpoint"),
            ShapeMismatch { .. } => (2, "shape_mismatch"),
            TruncatedPayload { .. } => (2, "truncated_payload"),
            Io(e) if e.kind() == std::io::ErrorKind::NotFound => (2, "missing_artifact"),
            Io(_) => (2, "io"),
            Json(_) => (2, "json"),
            Csv(_) => (2, "csv"),
            NonFiniteGradient { .. } => (3, "non_finite_gradient"),
            NonFinite(_) => (3, "non_finite"),
            DegeneratePair { .. } => (3, "degenerate_pair"),
            Undefined(_) => (3, "undefined"),
            InsufficientData(_) => (3, "insufficient_data"),
            Diverged { .. } => (3, "diverged"),
            Irreproducible(_) => (3, "irreproducible"),
        }
    }
}
