// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::manifest::{num, sha256_bytes, Manifest, OutputDir, MANIFEST, VERSION};
use super::{progress, Command, Overrides};
use crate::attribution::{universe_size, AttributionTable, BackwardMode, PeapOptions, Provenance};
use crate::circuits::{
    layer_pair_grid, layerwise_iou, random_layerwise_baseline, split_half, top_k, write_csv as write_circuit_csv,
    write_dot, write_heatmap_csv, SplitHalfOptions,
};
use crate::error::{Error, Result};
use crate::experiments::{
    format_name, fti_experiment, generate_dataset, le_circuit, le_steering_bundle, overlap, pair_runs, parse_format,
    steering_experiment, structural_null_p99, trace, zero_ablate_le, Dataset,
};
use crate::interventions::{
    faithfulness_curve, iterative_ablation, logit_lens, phase_transition, pooled_faithfulness,
    random_faithfulness_curve, FaithfulnessCurve,
};
use crate::model::{
    forward_with_cache, read_checkpoint, write_checkpoint, Component, InterventionPlan, NodeRef, Prompt, Transformer,
};
use crate::signals::{correlate, residual_features, signal_m1_m2, signal_m3_probe, signal_m4_direction, SignalTable};
use crate::tasks::{derive_seed, evaluate_accuracy, train, Format, TaskKind};

/// Inputs read, seeds used and the weight hash, gathered while a command runs.
#[derive(Default)]
struct Ctx {
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    weight_hash: Option<String>,
}

fn resolve(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

impl Ctx {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        self.inputs.insert(path.display().to_string(), sha256_bytes(&bytes));
        Ok(bytes)
    }

    fn data(&mut self, path: &Path) -> Result<Dataset> {
        let bytes = self.read(&resolve(path, "data.json"))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn model(&mut self, path: &Path) -> Result<Transformer> {
        let bytes = self.read(&resolve(path, "model.ckpt"))?;
        let w = read_checkpoint(bytes.as_slice())?;
        self.weight_hash = Some(w.content_hash());
        Ok(w.compile())
    }

    fn table(&mut self, path: &Path) -> Result<AttributionTable> {
        let bytes = self.read(path)?;
        let task = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        AttributionTable::read_csv(
            bytes.as_slice(),
            Provenance {
                mode: "file".into(),
                task,
                seed: 0,
            },
        )
    }

    fn seed(&mut self, name: &str, s: u64) -> u64 {
        self.seeds.insert(name.into(), s);
        s
    }
}

fn apply_overrides(mut cfg: RunConfig, o: &Overrides) -> Result<RunConfig> {
    if let Some(k) = o.k {
        cfg.analysis.k = k;
    }
    if let Some(g) = o.min_gap {
        cfg.analysis.min_gap = g;
    }
    if let Some(m) = &o.mode {
        cfg.analysis.mode = match m.as_str() {
            "gradient" => BackwardMode::Gradient,
            "lrp" => BackwardMode::Lrp(Default::default()),
            _ => return Err(Error::Config(format!("unknown mode `{m}` (expected gradient or lrp)"))),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn peap_options(cfg: &RunConfig) -> PeapOptions {
    PeapOptions {
        mode: cfg.analysis.mode,
        side: cfg.analysis.side,
        min_gap: cfg.analysis.min_gap,
    }
}

fn kv_rows(rows: &[(&str, String)]) -> Vec<Vec<String>> {
    rows.iter().map(|(k, v)| vec![k.to_string(), v.clone()]).collect()
}

fn s<T: ToString>(x: T) -> String {
    x.to_string()
}

pub(super) fn run(command: Command, cfg: Option<RunConfig>, out_path: &Path) -> Result<Manifest> {
    let mut out = OutputDir::create(out_path)?;
    let mut ctx = Ctx::default();
    let cfg = match (&command, cfg) {
        (
            Command::Trace { overrides, .. }
            | Command::Overlap { overrides, .. }
            | Command::SplitHalf { overrides, .. }
            | Command::Faithfulness { overrides, .. }
            | Command::Ablate { overrides, .. }
            | Command::ZeroAblate { overrides, .. }
            | Command::Fti { overrides, .. }
            | Command::Steer { overrides, .. }
            | Command::Judge { overrides, .. },
            Some(c),
        ) => Some(apply_overrides(c, overrides)?),
        (_, c) => c,
    };
    progress(command.name(), 0.0);
    let mut failure = None;
    match (&command, &cfg) {
        (Command::GenData { seed, .. }, Some(cfg)) => gen_data(cfg, ctx.seed("seed", seed.seed), &mut out)?,
        (Command::Train { seed, data, .. }, Some(cfg)) => {
            let seed = ctx.seed("seed", seed.seed);
            let data = ctx.data(data)?;
            train_cmd(cfg, &data, seed, &mut ctx, &mut out)?
        }
        (Command::Trace { inputs, format, .. }, Some(cfg)) => {
            let data = ctx.data(&inputs.data)?;
            let model = ctx.model(&inputs.model)?;
            let formats = match format.as_str() {
                "both" => vec![Format::Rating, Format::Classification],
                f => vec![parse_format(f)?],
            };
            trace_cmd(cfg, &data, &model, &formats, &mut out)?
        }
        (Command::Overlap { seed, a, b, .. }, Some(cfg)) => {
            let seed = ctx.seed("seed", seed.seed);
            let (ta, tb) = (ctx.table(a)?, ctx.table(b)?);
            overlap_cmd(cfg, &ta, &tb, seed, &mut out)?
        }
        (
            Command::SplitHalf {
                seed, inputs, format, ..
            },
            Some(cfg),
        ) => {
            let seed = ctx.seed("seed", seed.seed);
            let data = ctx.data(&inputs.data)?;
            let model = ctx.model(&inputs.model)?;
            split_half_cmd(cfg, &data, &model, parse_format(format)?, seed, &mut out)?
        }
        (
            Command::Faithfulness {
                seed,
                inputs,
                attribution,
                format,
                ..
            },
            Some(cfg),
        ) => {
            let seed = ctx.seed("seed", seed.seed);
            let data = ctx.data(&inputs.data)?;
            let model = ctx.model(&inputs.model)?;
            let table = ctx.table(attribution)?;
            faithfulness_cmd(cfg, &data, &model, &table, parse_format(format)?, seed, &mut out)?
        }
        (
            Command::Ablate {
                inputs,
                attribution,
                format,
                ..
            },
            Some(cfg),
        ) => {
            let data = ctx.data(&inputs.data)?;
            let model = ctx.model(&inputs.model)?;
            let table = ctx.table(attribution)?;
            ablate_cmd(cfg, &data, &model, &table, parse_format(format)?, &mut out)?
        }
        (Command::ZeroAblate { inputs, tables, .. }, Some(cfg))
        | (Command::Fti { inputs, tables, .. }, Some(cfg))
        | (Command::Steer { inputs, tables, .. }, Some(cfg))
        | (Command::Judge { inputs, tables, .. }, Some(cfg)) => {
            let data = ctx.data(&inputs.data)?;
            let model = ctx.model(&inputs.model)?;
            let (rate, class) = (ctx.table(&tables.rate)?, ctx.table(&tables.class)?);
            let le = le_circuit(&rate, &class, cfg.analysis.k, &model.spec)?;
            match &command {
                Command::ZeroAblate { .. } => zero_ablate_cmd(&data, &model, &le, &mut out)?,
                Command::Fti { .. } => fti_cmd(&data, &model, &le, &mut out)?,
                Command::Steer { seed, .. } => {
                    let seed = ctx.seed("seed", seed.seed);
                    steer_cmd(cfg, &data, &model, &le, seed, &mut out)?
                }
                Command::Judge { seed, .. } => {
                    let seed = ctx.seed("seed", seed.seed);
                    judge_cmd(cfg, &data, &model, &le, seed, &mut out)?
                }
                _ => unreachable!(),
            }
        }
        (Command::Lens { inputs, .. }, Some(cfg)) => {
            let data = ctx.data(&inputs.data)?;
            let model = ctx.model(&inputs.model)?;
            lens_cmd(cfg, &data, &model, &mut out)?
        }
        (Command::Report { dir, rerun, .. }, None) => {
            failure = report_cmd(dir, *rerun, out_path, &mut ctx, &mut out)?;
        }
        _ => return Err(Error::Config("command needs a configuration".into())),
    }
    let manifest = out.finish(Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: VERSION.into(),
        config_hash: cfg.as_ref().map(|c| c.hash()),
        config: cfg,
        command,
        seeds: ctx.seeds,
        weight_hash: ctx.weight_hash,
        inputs: ctx.inputs,
        outputs: BTreeMap::new(),
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn gen_data(cfg: &RunConfig, seed: u64, out: &mut OutputDir) -> Result<()> {
    let data = generate_dataset(&cfg.task, &cfg.data, seed)?;
    out.write("data.json", &serde_json::to_vec(&data)?)?;
    let rows: Vec<Vec<String>> = [
        ("train", data.train.len()),
        ("eval_rating", data.eval_rating.len()),
        ("eval_classification", data.eval_classification.len()),
        ("eval_knowledge", data.eval_knowledge.len()),
        ("pairs", data.pairs.len()),
    ]
    .iter()
    .map(|(k, n)| vec![s(k), s(n)])
    .collect();
    out.write_rows("data_summary.csv", &["split", "n"], &rows)
}

fn train_cmd(cfg: &RunConfig, data: &Dataset, seed: u64, ctx: &mut Ctx, out: &mut OutputDir) -> Result<()> {
    let tc = crate::tasks::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let every = (tc.steps / 20).max(1);
    let report = train(&cfg.model, &data.train, &tc, |step, _| {
        if step % every == 0 {
            progress("train", 100.0 * step as f64 / tc.steps as f64);
        }
    })?;
    ctx.weight_hash = Some(report.weights.content_hash());
    out.write_with("model.ckpt", |buf| write_checkpoint(&report.weights, buf))?;
    let log: Vec<Vec<String>> = report.losses.iter().map(|(st, l)| vec![s(st), num(*l)]).collect();
    out.write_rows("train_log.csv", &["step", "loss"], &log)?;
    let model = report.weights.compile();
    let held = evaluate_accuracy(&model, &data.eval_all(), Some(&data.task))?;
    let rows: Vec<Vec<String>> = held
        .iter()
        .map(|(k, acc)| {
            vec![
                task_name(*k).into(),
                num(report.accuracy.get(k).copied().unwrap_or(f64::NAN)),
                num(*acc),
            ]
        })
        .collect();
    out.write_rows("accuracy.csv", &["task", "train_accuracy", "heldout_accuracy"], &rows)
}

fn task_name(k: TaskKind) -> &'static str {
    match k {
        TaskKind::Rating => "rating",
        TaskKind::Classification => "classification",
        TaskKind::Knowledge => "knowledge",
    }
}

fn trace_cmd(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Transformer,
    formats: &[Format],
    out: &mut OutputDir,
) -> Result<()> {
    let opts = peap_options(cfg);
    let len = data.task.prompt_len();
    let mut summary = Vec::new();
    for (i, &f) in formats.iter().enumerate() {
        let name = format_name(f);
        progress("trace", 100.0 * i as f64 / formats.len() as f64);
        let t = trace(model, &data.task, &data.pairs, f, &opts)?;
        out.write_with(&format!("attribution_{name}.csv"), |b| t.aggregate.write_csv(b))?;
        let c = top_k(&t.aggregate, cfg.analysis.k, &model.spec)?;
        out.write_with(&format!("circuit_{name}.csv"), |b| write_circuit_csv(&c, b))?;
        out.write_with(&format!("circuit_{name}.dot"), |b| write_dot(&c, b))?;
        out.write_with(&format!("heatmap_{name}.csv"), |b| write_heatmap_csv(&c, len, b))?;
        summary.push(vec![
            name.into(),
            s(data.pairs.len()),
            s(t.tables.len()),
            s(t.skipped.len()),
            s(universe_size(&model.spec, len)),
            s(c.len()),
        ]);
    }
    out.write_rows(
        "trace_summary.csv",
        &["format", "pairs", "used", "skipped", "universe", "circuit_edges"],
        &summary,
    )
}

fn overlap_cmd(
    cfg: &RunConfig,
    a: &AttributionTable,
    b: &AttributionTable,
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let spec = &cfg.model;
    let an = &cfg.analysis;
    let r = overlap(a, b, an.k, spec, an.null_samples, seed)?;
    let rows = [
        ("k", s(an.k)),
        ("a_edges", s(r.rate.len())),
        ("b_edges", s(r.class.len())),
        ("edge_iou", num(r.edge_iou)),
        ("node_iou", num(r.node_iou)),
        ("shared_edges", s(r.le.len())),
        ("shared_structural", s(r.le_structural)),
        ("a_only_edges", s(r.tf_rate.len())),
        ("b_only_edges", s(r.tf_class.len())),
        (
            "shared_median_depth",
            r.le_median_depth.map(num).unwrap_or_else(|| "undefined".into()),
        ),
        ("universe_median_depth", num(r.universe_median_depth)),
        ("null_p99", num(r.null_p99)),
    ];
    out.write_rows("overlap.csv", &["metric", "value"], &kv_rows(&rows))?;
    out.write_with("shared_circuit.csv", |w| write_circuit_csv(&r.le, w))?;
    out.write_with("shared_circuit.dot", |w| write_dot(&r.le, w))?;
    let lw = layerwise_iou(&r.rate, &r.class, an.n_bins)?;
    let pool_a: Vec<_> = a.edges.keys().copied().collect();
    let pool_b: Vec<_> = b.edges.keys().copied().collect();
    let kk = an.k.min(pool_a.len()).min(pool_b.len());
    let band = random_layerwise_baseline(
        &pool_a,
        &pool_b,
        kk,
        spec.n_layers,
        an.n_bins,
        an.null_samples,
        derive_seed(seed, 1),
    )?;
    let opt = |x: Option<f64>| x.map(num).unwrap_or_else(|| "undefined".into());
    let rows: Vec<Vec<String>> = lw
        .iter()
        .zip(&band)
        .enumerate()
        .map(|(i, (v, bnd))| {
            vec![
                s(i),
                opt(*v),
                opt(bnd.map(|x| x.mean)),
                opt(bnd.map(|x| x.lo)),
                opt(bnd.map(|x| x.hi)),
            ]
        })
        .collect();
    out.write_rows(
        "layerwise.csv",
        &["bin", "iou", "random_mean", "random_lo", "random_hi"],
        &rows,
    )?;
    let grid = layer_pair_grid(&r.rate, &r.class)?;
    let rows: Vec<Vec<String>> = grid
        .defined()
        .iter()
        .map(|(a, b, v)| vec![s(a), s(b), num(*v)])
        .collect();
    out.write_rows("layer_grid.csv", &["sender_layer", "receiver_layer", "iou"], &rows)
}

fn split_half_cmd(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Transformer,
    format: Format,
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let an = &cfg.analysis;
    let t = trace(model, &data.task, &data.pairs, format, &peap_options(cfg))?;
    progress("split-half", 50.0);
    let opts = SplitHalfOptions {
        k: an.k,
        n_partitions: an.n_partitions,
        seed,
        spearman_brown: false,
        min_layer: None,
    };
    let r = split_half(&t.tables, &opts, &model.spec)?;
    let pool: Vec<_> = t.aggregate.edges.keys().copied().collect();
    let null = structural_null_p99(&pool, an.k.min(pool.len()), an.null_samples, derive_seed(seed, 1))?;
    let rows: Vec<Vec<String>> = r
        .per_partition
        .iter()
        .enumerate()
        .map(|(i, v)| vec![s(i), num(*v)])
        .collect();
    out.write_rows("split_half.csv", &["partition", "iou"], &rows)?;
    let rows = [
        ("format", format_name(format).to_string()),
        ("pairs_used", s(t.tables.len())),
        ("mean", num(r.mean)),
        ("sd", num(r.sd)),
        ("null_p99", num(null)),
    ];
    out.write_rows("split_half_summary.csv", &["metric", "value"], &kv_rows(&rows))
}

/// Grid clamped to the universe size, deduplicated.
fn clamp_grid(grid: &[usize], universe: usize) -> Vec<usize> {
    let mut g: Vec<usize> = grid.iter().map(|&k| k.min(universe)).collect();
    g.sort_unstable();
    g.dedup();
    g
}

fn curve_rows(name: &str, c: &FaithfulnessCurve) -> Vec<Vec<String>> {
    c.points
        .iter()
        .map(|p| {
            vec![
                name.into(),
                s(p.k),
                num(p.median),
                num(p.mean),
                num(p.ci_lo),
                num(p.ci_hi),
                s(p.used),
                s(p.skipped),
            ]
        })
        .collect()
}

fn faithfulness_cmd(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Transformer,
    table: &AttributionTable,
    format: Format,
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let an = &cfg.analysis;
    let metric = data.task.metric(format);
    let runs = pair_runs(model, &data.task, &data.pairs_for(format)?)?;
    let grid = clamp_grid(&an.k_grid, universe_size(&model.spec, data.task.prompt_len()));
    let peap = faithfulness_curve(model, &runs, table, &grid, an.min_gap, &metric, derive_seed(seed, 0))?;
    progress("faithfulness", 50.0);
    let random = random_faithfulness_curve(model, &runs, &grid, an.min_gap, &metric, derive_seed(seed, 1))?;
    let mut rows = curve_rows("peap", &peap);
    rows.extend(curve_rows("random", &random));
    out.write_rows(
        "faithfulness.csv",
        &["curve", "k", "median", "mean", "ci_lo", "ci_hi", "used", "skipped"],
        &rows,
    )?;
    let pooled = pooled_faithfulness(model, &runs, table, &grid, &metric)?;
    let rows: Vec<Vec<String>> = pooled.iter().map(|(k, v)| vec![s(k), num(*v)]).collect();
    out.write_rows("faithfulness_pooled.csv", &["k", "pooled"], &rows)
}

fn ablate_cmd(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Transformer,
    table: &AttributionTable,
    format: Format,
    out: &mut OutputDir,
) -> Result<()> {
    let an = &cfg.analysis;
    let metric = data.task.metric(format);
    let pairs = data.pairs_for(format)?;
    let runs = pair_runs(model, &data.task, &pairs)?;
    let targets: Vec<u32> = pairs
        .iter()
        .map(|p| data.task.target(p.clean_rating, format))
        .collect::<Result<_>>()?;
    let circuit = top_k(table, an.k, &model.spec)?;
    let counts: Vec<usize> = an
        .ablation_counts
        .iter()
        .copied()
        .filter(|&c| c <= circuit.len())
        .collect();
    let traj = iterative_ablation(model, &runs, &targets, &metric.tokens, &circuit, &counts, &metric)?;
    let rows: Vec<Vec<String>> = traj
        .iter()
        .map(|st| vec![s(st.edges), num(st.mean_ev), num(st.accuracy)])
        .collect();
    out.write_rows("ablation.csv", &["edges", "mean_ev", "accuracy"], &rows)?;
    let rows = match phase_transition(&traj) {
        Some(p) => vec![
            ("max_drop", num(p.max_drop)),
            ("median_drop", num(p.median_drop)),
            ("at_edges", s(p.at_edges)),
        ],
        None => vec![("max_drop", "undefined".into())],
    };
    out.write_rows("ablation_summary.csv", &["metric", "value"], &kv_rows(&rows))
}

fn zero_ablate_cmd(
    data: &Dataset,
    model: &Transformer,
    le: &crate::circuits::Circuit,
    out: &mut OutputDir,
) -> Result<()> {
    let (senders, deltas) = zero_ablate_le(model, data, le)?;
    let rows: Vec<Vec<String>> = deltas
        .iter()
        .map(|d| vec![d.suite.clone(), s(d.n), num(d.before), num(d.after), num(d.delta())])
        .collect();
    out.write_rows("zero_ablation.csv", &["suite", "n", "before", "after", "delta"], &rows)?;
    let rows: Vec<Vec<String>> = senders.iter().map(|c| vec![s(c)]).collect();
    out.write_rows("ablated_components.csv", &["component"], &rows)
}

fn fti_cmd(data: &Dataset, model: &Transformer, le: &crate::circuits::Circuit, out: &mut OutputDir) -> Result<()> {
    let (nodes, r) = fti_experiment(model, data, le)?;
    let rows: Vec<Vec<String>> = r
        .instances
        .iter()
        .map(|i| {
            vec![
                s(i.index),
                num(i.source_ev),
                num(i.base_prob),
                num(i.patched_prob),
                s(i.base_token),
                s(i.patched_token),
                s(i.flipped),
            ]
        })
        .collect();
    out.write_rows(
        "fti.csv",
        &[
            "index",
            "source_ev",
            "base_prob",
            "patched_prob",
            "base_token",
            "patched_token",
            "flipped",
        ],
        &rows,
    )?;
    let rows = [
        ("nodes", s(nodes.len())),
        ("candidates", s(r.candidates)),
        ("n", s(r.n)),
        ("flips", s(r.flips)),
        ("flip_rate", num(r.flip_rate)),
        ("base_mean", num(r.base_mean)),
        ("base_sd", num(r.base_sd)),
        ("patched_mean", num(r.patched_mean)),
        ("patched_sd", num(r.patched_sd)),
        ("off_label", s(r.off_label)),
    ];
    out.write_rows("fti_summary.csv", &["metric", "value"], &kv_rows(&rows))
}

fn steer_cmd(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Transformer,
    le: &crate::circuits::Circuit,
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let an = &cfg.analysis;
    let bundle = le_steering_bundle(model, data, le)?;
    let r = steering_experiment(
        model,
        data,
        &bundle,
        &an.alphas,
        an.steer_prompts,
        an.rotations,
        an.control_alpha,
        seed,
    )?;
    let mut rows = Vec::new();
    for (i, evs) in r.ev.iter().enumerate() {
        for (a, ev) in r.alphas.iter().zip(evs) {
            rows.push(vec![s(i), num(*a), num(*ev)]);
        }
    }
    out.write_rows("steering.csv", &["prompt", "alpha", "ev"], &rows)?;
    let rows: Vec<Vec<String>> = r
        .rotation_effects
        .iter()
        .enumerate()
        .map(|(i, e)| vec![s(i), num(*e)])
        .collect();
    out.write_rows("steering_rotations.csv", &["rotation", "mean_delta_ev"], &rows)?;
    let rho_min = r.rho.iter().copied().fold(f64::INFINITY, f64::min);
    let rows = [
        ("hooks", s(bundle.hooks.len())),
        ("mean_norm", num(bundle.mean_norm())),
        ("zero_identical", s(r.zero_identical)),
        ("rho_min", num(rho_min)),
        (
            "rho_median",
            crate::stats::median(&r.rho)
                .map(num)
                .unwrap_or_else(|| "undefined".into()),
        ),
        ("control_alpha", num(r.control_alpha)),
        ("true_effect", num(r.true_effect)),
        ("max_rotation_effect", num(r.max_rotation_effect())),
    ];
    out.write_rows("steering_summary.csv", &["metric", "value"], &kv_rows(&rows))
}

fn lens_cmd(cfg: &RunConfig, data: &Dataset, model: &Transformer, out: &mut OutputDir) -> Result<()> {
    let spec = &model.spec;
    let targets = data.task.rating_scale().tokens;
    let examples: Vec<_> = data.eval_rating.iter().take(cfg.analysis.lens_prompts).collect();
    if examples.is_empty() {
        return Err(Error::InsufficientData("no prompts for the lens".into()));
    }
    let mut nodes = vec![Component::Embed];
    nodes.extend((0..spec.n_layers).map(|l| Component::Mlp { layer: l }));
    let mut rows = Vec::new();
    for c in nodes {
        let (mut mass, mut in_scale, mut correct) = (0.0, 0usize, 0usize);
        for e in &examples {
            let (_, cache) = forward_with_cache(model, &Prompt::from(e.tokens.clone()), &InterventionPlan::new())?;
            let r = logit_lens(model, &cache, NodeRef::new(c, -1), &targets, 5, true)?;
            mass += r.target_mass;
            let best = r
                .targets
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|t| t.0)
                .expect("nonempty targets");
            in_scale += targets.contains(&r.argmax) as usize;
            correct += (best == e.target) as usize;
        }
        let n = examples.len() as f64;
        rows.push(vec![
            s(c),
            s(c.depth(spec.n_layers)),
            num(mass / n),
            num(in_scale as f64 / n),
            num(correct as f64 / n),
        ]);
    }
    out.write_rows(
        "lens.csv",
        &[
            "node",
            "layer",
            "rating_mass",
            "argmax_is_rating",
            "best_rating_correct",
        ],
        &rows,
    )
}

fn judge_cmd(
    cfg: &RunConfig,
    data: &Dataset,
    model: &Transformer,
    le: &crate::circuits::Circuit,
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let an = &cfg.analysis;
    let scale = data.task.rating_scale();
    let prompts: Vec<Prompt> = data.eval_rating.iter().map(|e| e.tokens.clone().into()).collect();
    let labels: Vec<f64> = data
        .eval_rating
        .iter()
        .map(|e| {
            e.rating
                .map(f64::from)
                .ok_or_else(|| Error::Config("rating example without rating".into()))
        })
        .collect::<Result<_>>()?;
    let (m1, m2) = signal_m1_m2(model, &prompts, &scale)?;
    let site = Component::Mlp {
        layer: model.spec.n_layers - 1,
    };
    let features = residual_features(model, &prompts, site)?;
    let m3 = signal_m3_probe(&features, &labels, an.folds, &an.lambdas, seed)?.predictions;
    let bundle = le_steering_bundle(model, data, le)?;
    let m4 = signal_m4_direction(model, &prompts, &bundle, &m2)?;
    let table = SignalTable::new(m1, m2, m3, m4)?;
    out.write_with("signals.csv", |w| table.write_csv(&labels, w))?;
    let rho = correlate(&table, &labels)?;
    let rows: Vec<Vec<String>> = ["m1", "m2", "m3", "m4"]
        .iter()
        .zip(rho)
        .map(|(n, r)| vec![s(n), num(r)])
        .collect();
    out.write_rows("signal_correlations.csv", &["signal", "spearman"], &rows)
}

/// Every directory under `root` holding a manifest, sorted, excluding `skip`.
fn find_runs(root: &Path, skip: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d == skip {
            continue;
        }
        if d.join(MANIFEST).is_file() {
            out.push(d.clone());
        }
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Files excluded from the long-format summary (large per-edge tables).
fn summarized(name: &str) -> bool {
    name.ends_with(".csv")
        && !name.starts_with("attribution_")
        && !name.starts_with("heatmap_")
        && name != "train_log.csv"
}

/// Writes the summaries; on `--rerun`, returns the reproducibility failure, if any,
/// after the outputs are on disk.
fn report_cmd(dir: &Path, rerun: bool, self_out: &Path, ctx: &mut Ctx, out: &mut OutputDir) -> Result<Option<Error>> {
    let self_out = self_out.canonicalize()?;
    let runs = find_runs(dir, &self_out)?;
    if runs.is_empty() {
        return Err(Error::InsufficientData(format!("no manifests under {}", dir.display())));
    }
    let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
    let mut run_rows = Vec::new();
    let mut out_rows = Vec::new();
    let mut long_rows = Vec::new();
    let mut manifests = Vec::new();
    for r in &runs {
        ctx.read(&r.join(MANIFEST))?;
        let m = Manifest::load(r)?;
        let name = rel(r);
        run_rows.push(vec![
            name.clone(),
            m.command.name().into(),
            m.version.clone(),
            m.config_hash.clone().unwrap_or_default(),
            m.weight_hash.clone().unwrap_or_default(),
            s(m.outputs.len()),
        ]);
        for (file, hash) in &m.outputs {
            out_rows.push(vec![name.clone(), file.clone(), hash.clone()]);
            if !summarized(file) {
                continue;
            }
            let bytes = ctx.read(&r.join(file))?;
            let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(bytes.as_slice());
            let header = rd.headers()?.clone();
            for (i, rec) in rd.records().enumerate() {
                for (j, v) in rec?.iter().enumerate() {
                    let col = header.get(j).unwrap_or("");
                    long_rows.push(vec![name.clone(), file.clone(), s(i), col.to_string(), v.to_string()]);
                }
            }
        }
        manifests.push((name, r.clone(), m));
    }
    out.write_rows(
        "runs.csv",
        &["run", "command", "version", "config_hash", "weight_hash", "outputs"],
        &run_rows,
    )?;
    out.write_rows("outputs.csv", &["run", "file", "sha256"], &out_rows)?;
    out.write_rows("long.csv", &["run", "file", "row", "column", "value"], &long_rows)?;
    if !rerun {
        return Ok(None);
    }
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    let n = manifests.len();
    for (i, (name, _, m)) in manifests.iter().enumerate() {
        progress("rerun", 100.0 * i as f64 / n as f64);
        if matches!(m.command, Command::Report { .. }) {
            continue;
        }
        let got = rerun_manifest(m)?;
        for (file, want) in &m.outputs {
            let have = got.get(file).cloned().unwrap_or_else(|| "missing".into());
            let ok = &have == want;
            if !ok {
                bad.push(format!("{name}/{file}"));
            }
            rows.push(vec![name.clone(), file.clone(), want.clone(), have, s(ok)]);
        }
    }
    out.write_rows(
        "reproducibility.csv",
        &["run", "file", "expected", "got", "match"],
        &rows,
    )?;
    Ok((!bad.is_empty()).then(|| Error::Irreproducible(bad.join(", "))))
}

/// Re-execute a manifest into a scratch directory; returns its output hashes.
pub(super) fn rerun_manifest(m: &Manifest) -> Result<BTreeMap<String, String>> {
    for (path, want) in &m.inputs {
        let have = super::manifest::sha256_file(Path::new(path))?;
        if &have != want {
            return Err(Error::Irreproducible(format!("input {path} changed since the run")));
        }
    }
    let scratch = tempfile::tempdir()?;
    let mut cmd = m.command.clone();
    let common = cmd
        .common_mut()
        .ok_or_else(|| Error::Config("report runs are not re-executed".into()))?;
    let cfg = m
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("manifest without a configuration".into()))?;
    let cfg_path = scratch.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?)?;
    common.config = cfg_path;
    common.out = Some(scratch.path().join("out"));
    let got = super::execute(cmd)?;
    Ok(got.outputs)
}
