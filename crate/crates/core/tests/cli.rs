// SPDX-License-Identifier: MIT OR Apache-2.0

//! The command-line tool end to end, on a deliberately undertrained model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use judgecirc::cli::{Manifest, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_judgecirc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = RunConfig::tiny();
    c.train.steps = 40;
    c.data.n_train = 300;
    c.data.n_eval = 40;
    c.data.n_pairs = 8;
    c.analysis.null_samples = 100;
    c.analysis.k = 20;
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_kv(path: &Path) -> std::collections::BTreeMap<String, String> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    rd.records()
        .map(|r| r.unwrap())
        .map(|r| (r[0].to_string(), r[1].to_string()))
        .collect()
}

#[test]
fn shipped_configs_are_the_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, preset) in [
        ("tiny.json", RunConfig::tiny()),
        ("reference.json", RunConfig::reference()),
    ] {
        let loaded = RunConfig::load(&root.join(name)).unwrap();
        assert_eq!(loaded.hash(), preset.hash(), "{name}");
    }
}

#[test]
fn pipeline_writes_manifests_and_self_overlap_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let (data, model, trace, ov) = (d.join("data"), d.join("model"), d.join("trace"), d.join("overlap"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--seed", "1"]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--seed",
        "2",
    ]);
    ok(&[
        "trace",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--out",
        s(&trace),
        "--format",
        "rating",
        "--min-gap",
        "0",
    ]);
    let table = trace.join("attribution_rating.csv");
    ok(&[
        "overlap",
        "--config",
        s(&cfg),
        "--a",
        s(&table),
        "--b",
        s(&table),
        "--out",
        s(&ov),
        "--seed",
        "3",
    ]);
    let kv = read_kv(&ov.join("overlap.csv"));
    assert_eq!(kv["edge_iou"], "1");
    assert_eq!(kv["node_iou"], "1");

    let m = Manifest::load(&model).unwrap();
    assert_eq!(m.seeds["seed"], 2);
    assert!(m.weight_hash.is_some());
    assert_eq!(
        m.config_hash.as_deref(),
        Some(RunConfig::load(&cfg).unwrap().hash().as_str())
    );
    for (file, sha) in &m.outputs {
        let bytes = std::fs::read(model.join(file)).unwrap();
        use sha2::{Digest, Sha256};
        assert_eq!(&hex::encode(Sha256::digest(&bytes)), sha, "{file}");
    }
    let t = Manifest::load(&trace).unwrap();
    assert!(t.inputs.len() >= 2);
}

#[test]
fn failures_map_to_exit_codes_and_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    // Missing artifact.
    let out = d.join("t");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&d.join("nope")),
        "--out",
        s(&out),
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error code=2 kind=missing_artifact"), "{err}");
    assert!(!out.exists());
    // Unknown config field.
    let bad = d.join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["analysis"]["bogus"] = 1.into();
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = run(&["gen-data", "--config", s(&bad), "--out", s(&d.join("g")), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    // Stochastic commands need an explicit seed.
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&d.join("g"))]);
    assert_eq!(o.status.code(), Some(1));
    // Outputs are write-once.
    let g = d.join("g");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&g), "--seed", "1"]);
    let before = std::fs::read(g.join("data.json")).unwrap();
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&g), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(std::fs::read(g.join("data.json")).unwrap(), before);
}

#[test]
fn gen_data_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        ok(&[
            "gen-data",
            "--config",
            s(&cfg),
            "--out",
            s(&d.join(name)),
            "--seed",
            seed,
        ]);
    }
    let read = |n: &str| std::fs::read(d.join(n).join("data.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
