// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration and its canonical hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{BackwardMode, GradientSide};
use crate::circuits::DEFAULT_K;
use crate::error::{Error, Result};
use crate::experiments::DataConfig;
use crate::interventions::DEFAULT_ALPHAS;
use crate::model::{Activation, ModelSpec};
use crate::signals::{DEFAULT_FOLDS, DEFAULT_LAMBDAS};
use crate::tasks::{TaskSpec, TrainConfig};

/// Analysis parameters shared by the trace and intervention commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub k: usize,
    pub k_grid: Vec<usize>,
    pub min_gap: f64,
    pub mode: BackwardMode,
    pub side: GradientSide,
    pub n_partitions: usize,
    pub null_samples: usize,
    pub n_bins: usize,
    pub alphas: Vec<f64>,
    pub control_alpha: f64,
    pub rotations: usize,
    pub steer_prompts: usize,
    pub folds: usize,
    pub lambdas: Vec<f64>,
    /// Edge counts for iterative ablation.
    pub ablation_counts: Vec<usize>,
    pub lens_prompts: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            k_grid: vec![0, 10, 25, 50, 100, 200, 400, 800, 1600, 1_000_000],
            min_gap: 0.05,
            mode: BackwardMode::Gradient,
            side: GradientSide::Corrupt,
            n_partitions: 10,
            null_samples: 1000,
            n_bins: 4,
            alphas: DEFAULT_ALPHAS.to_vec(),
            control_alpha: 1.0,
            rotations: 10,
            steer_prompts: 50,
            folds: DEFAULT_FOLDS,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            ablation_counts: vec![0, 5, 10, 20, 40, 80, 120, 160, 200],
            lens_prompts: 50,
        }
    }
}

/// Everything a run depends on besides its input artifacts and its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    /// Default output directory; `--out` overrides it. Not part of the hash.
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl RunConfig {
    /// 4-layer multi-task reference model.
    pub fn reference() -> Self {
        let task = TaskSpec::default();
        Self {
            model: ModelSpec {
                n_layers: 4,
                n_heads: 4,
                d_model: 128,
                d_head: 32,
                d_mlp: 256,
                vocab_size: task.vocab_size(),
                max_seq: 16,
                ln_epsilon: 1e-5,
                activation: Activation::Gelu,
            },
            task,
            train: TrainConfig {
                steps: 2500,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: None,
        }
    }

    /// 2-layer model that trains in well under a minute.
    pub fn tiny() -> Self {
        let mut c = Self::reference();
        c.model.n_layers = 2;
        c.model.n_heads = 2;
        c.model.d_model = 64;
        c.model.d_head = 32;
        c.model.d_mlp = 128;
        c.train.steps = 600;
        c.train.lr = 3e-3;
        c.data = DataConfig {
            n_train: 1500,
            n_eval: 200,
            n_pairs: 60,
        };
        c.analysis.null_samples = 200;
        c.analysis.k_grid = vec![0, 10, 50, 100, 200, 400, 1_000_000];
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        if self.model.vocab_size < self.task.vocab_size() {
            return Err(Error::Config(format!(
                "model vocabulary {} smaller than task vocabulary {}",
                self.model.vocab_size,
                self.task.vocab_size()
            )));
        }
        if self.model.max_seq < self.task.prompt_len() {
            return Err(Error::Config("max_seq shorter than the judgment prompt".into()));
        }
        if self.analysis.k == 0 {
            return Err(Error::Config("analysis.k must be >= 1".into()));
        }
        if !(self.analysis.min_gap >= 0.0) {
            return Err(Error::Config("analysis.min_gap must be >= 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sorted-key JSON with `output_dir` removed.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        // serde_json's default map is a BTreeMap, so keys come out sorted.
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_dir_and_key_order() {
        let a = RunConfig::tiny();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        // Reparse from pretty JSON with a different layout.
        let pretty = serde_json::to_string_pretty(&a).unwrap();
        let c: RunConfig = serde_json::from_str(&pretty).unwrap();
        assert_eq!(a.hash(), c.hash());
        b.analysis.k += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn canonical_keys_sorted() {
        let j = RunConfig::tiny().canonical_json();
        let a = j.find("\"analysis\"").unwrap();
        let d = j.find("\"data\"").unwrap();
        let m = j.find("\"model\"").unwrap();
        assert!(a < d && d < m);
    }

    #[test]
    fn presets_validate() {
        RunConfig::reference().validate().unwrap();
        RunConfig::tiny().validate().unwrap();
    }
}
