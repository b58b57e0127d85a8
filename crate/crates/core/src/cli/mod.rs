// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `judgecirc` command-line tool.
//!
//! Every command reads a JSON [`RunConfig`], writes CSV results into a fresh output
//! directory and finishes with a `manifest.json` holding the config hash, seeds, weight
//! hash, input hashes and output hashes. Failures print one line to stderr,
//! `error code=<n> kind=<tag> msg="..."`, and exit with 1 (configuration), 2 (missing
//! or unreadable artifact) or 3 (numeric failure).

mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{AnalysisConfig, RunConfig};
pub use manifest::{Manifest, OutputDir};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "judgecirc", version, about = "Judge-circuit discovery on small transformers")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flags that override analysis fields of the config.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct Overrides {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub min_gap: Option<f64>,
    /// `gradient` or `lrp` (default LRP rules).
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Seeded {
    /// Master seed; required, there is no hidden entropy.
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelInputs {
    /// Dataset directory (or its data.json).
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory (or its model.ckpt).
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PairTables {
    /// Rating-format attribution CSV.
    #[arg(long)]
    pub rate: PathBuf,
    /// Classification-format attribution CSV.
    #[arg(long)]
    pub class: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate training data, held-out sets and minimal pairs.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
    },
    /// Train a model on the generated data.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-pair edge attribution, aggregated; writes tables and top-k circuits.
    Trace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        /// `rating`, `classification` or `both`.
        #[arg(long, default_value = "both")]
        format: String,
    },
    /// IoU, shared trunk and format-specific branches of two attribution tables.
    Overlap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Split-half reliability of one format's circuit.
    SplitHalf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "rating")]
        format: String,
    },
    /// Faithfulness curve of an attribution table and the random-edge baseline.
    Faithfulness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        attribution: PathBuf,
        #[arg(long, default_value = "rating")]
        format: String,
    },
    /// Iterative edge ablation along the ranked circuit.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        attribution: PathBuf,
        #[arg(long, default_value = "rating")]
        format: String,
    },
    /// Zero-ablate the shared-trunk senders and score every task.
    ZeroAblate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        tables: PairTables,
    },
    /// Format transfer injection from rating runs into classification runs.
    Fti {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        tables: PairTables,
    },
    /// Steering along the shared-trunk direction with a random-rotation control.
    Steer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        tables: PairTables,
    },
    /// Logit-lens readout of the rating tokens after each layer.
    Lens {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
    },
    /// Judgment signals M1-M4 against ground-truth ratings.
    Judge {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        tables: PairTables,
    },
    /// Summarize every run under a directory; `--rerun` re-executes each manifest
    /// and checks output hashes.
    Report {
        /// Directory scanned recursively for manifests.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rerun: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Trace { .. } => "trace",
            Command::Overlap { .. } => "overlap",
            Command::SplitHalf { .. } => "split-half",
            Command::Faithfulness { .. } => "faithfulness",
            Command::Ablate { .. } => "ablate",
            Command::ZeroAblate { .. } => "zero-ablate",
            Command::Fti { .. } => "fti",
            Command::Steer { .. } => "steer",
            Command::Lens { .. } => "lens",
            Command::Judge { .. } => "judge",
            Command::Report { .. } => "report",
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        use Command::*;
        match self {
            GenData { common, .. }
            | Train { common, .. }
            | Trace { common, .. }
            | Overlap { common, .. }
            | SplitHalf { common, .. }
            | Faithfulness { common, .. }
            | Ablate { common, .. }
            | ZeroAblate { common, .. }
            | Fti { common, .. }
            | Steer { common, .. }
            | Lens { common, .. }
            | Judge { common, .. } => Some(common),
            Report { .. } => None,
        }
    }

    /// Every input path the command reads, config excluded.
    fn input_paths_mut(&mut self) -> Vec<&mut PathBuf> {
        use Command::*;
        match self {
            GenData { .. } => vec![],
            Train { data, .. } => vec![data],
            Trace { inputs, .. } | SplitHalf { inputs, .. } | Lens { inputs, .. } => {
                vec![&mut inputs.data, &mut inputs.model]
            }
            Overlap { a, b, .. } => vec![a, b],
            Faithfulness {
                inputs, attribution, ..
            }
            | Ablate {
                inputs, attribution, ..
            } => vec![&mut inputs.data, &mut inputs.model, attribution],
            ZeroAblate { inputs, tables, .. }
            | Fti { inputs, tables, .. }
            | Steer { inputs, tables, .. }
            | Judge { inputs, tables, .. } => {
                vec![&mut inputs.data, &mut inputs.model, &mut tables.rate, &mut tables.class]
            }
            Report { dir, .. } => vec![dir],
        }
    }

    fn out_dir(&self, cfg: Option<&RunConfig>) -> Result<PathBuf> {
        match self {
            Command::Report { out, .. } => Ok(out.clone()),
            _ => {
                let mut c = self.clone();
                let common = c.common_mut().expect("non-report command");
                common
                    .out
                    .clone()
                    .or_else(|| cfg.and_then(|c| c.output_dir.clone()).map(PathBuf::from))
                    .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
            }
        }
    }
}

/// A structured progress line on stderr.
pub fn progress(phase: &str, pct: f64) {
    eprintln!("phase={phase} pct={pct:.0}");
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.exists() {
        Ok(p.canonicalize()?)
    } else {
        Err(Error::MissingArtifact(p.to_path_buf()))
    }
}

/// Run a parsed invocation. Returns the manifest that was written.
pub fn execute(mut command: Command) -> Result<Manifest> {
    for p in command.input_paths_mut() {
        *p = absolute(p)?;
    }
    let cfg = match command.common_mut() {
        Some(c) => {
            c.config = absolute(&c.config)?;
            Some(RunConfig::load(&c.config)?)
        }
        None => None,
    };
    let out = command.out_dir(cfg.as_ref())?;
    if let Some(c) = command.common_mut() {
        c.out = Some(out.clone());
    }
    let existed = out.exists();
    let result = commands::run(command, cfg, &out);
    if result.is_err() && !existed && !out.join(manifest::MANIFEST).exists() {
        // A run that failed before finishing leaves nothing behind.
        let _ = std::fs::remove_dir_all(&out);
    }
    result
}

/// Parse `args`, run, and map errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error code=1 kind=config msg=\"--threads must be >= 1\"");
            return 1;
        }
        // Fails only if a pool already exists, in which case the existing one is used.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok(m) => {
            eprintln!("phase=done pct=100 outputs={}", m.outputs.len());
            0
        }
        Err(e) => {
            let (code, kind) = e.exit_code();
            let msg = e.to_string().replace('"', "'").replace('\n', " ");
            eprintln!("error code={code} kind={kind} msg=\"{msg}\"");
            code
        }
    }
}
