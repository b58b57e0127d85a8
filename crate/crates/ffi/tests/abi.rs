// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use judgecirc::attribution::{edge_universe, AttributionTable, Provenance};
use judgecirc::metrics::{expected_rating, RatingScale};
use judgecirc::model::{forward, load_checkpoint, InterventionPlan, Prompt};
use judgecirc_ffi::*;

const SCALE: [u32; 5] = [1, 2, 3, 4, 5];

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/small_2l.ckpt")
}

fn load() -> *mut JcModel {
    let path = CString::new(fixture().to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { jc_model_load(path.as_ptr(), &mut m) }, JcStatus::JcOk);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = jc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn forward_and_rating_match_the_library() {
    let m = load();
    let lib = load_checkpoint(&fixture()).unwrap().compile();
    unsafe {
        assert_eq!(jc_model_vocab_size(m), 12);
        assert_eq!(jc_model_n_layers(m), 2);
        let toks = [0u32, 3, 7, 2];
        let mut out = vec![0.0; 12];
        assert_eq!(
            jc_forward_logits(m, toks.as_ptr(), 4, out.as_mut_ptr(), 12),
            JcStatus::JcOk
        );
        let want = forward(&lib, &Prompt::from(toks.to_vec()), &InterventionPlan::new()).unwrap();
        assert_eq!(out, want.row(3));

        let mut ev = 0.0;
        assert_eq!(
            jc_expected_rating(m, toks.as_ptr(), 4, SCALE.as_ptr(), 5, &mut ev),
            JcStatus::JcOk
        );
        assert_eq!(
            ev,
            expected_rating(want.row(3), &RatingScale::new(SCALE.to_vec()).unwrap()).unwrap()
        );

        assert_eq!(
            jc_forward_logits(m, toks.as_ptr(), 4, out.as_mut_ptr(), 11),
            JcStatus::JcBufferTooSmall
        );
        let bad = [0u32, 99];
        assert_eq!(
            jc_forward_logits(m, bad.as_ptr(), 2, out.as_mut_ptr(), 12),
            JcStatus::JcConfig
        );
        assert!(last_error().contains("99"));
        jc_model_free(m);
    }
}

#[test]
fn traced_tables_cover_the_universe_and_round_trip() {
    let m = load();
    let clean = [0u32, 3, 7, 2, 9];
    let corrupt = [0u32, 4, 7, 2, 10];
    let tmp = tempfile::tempdir().unwrap();
    unsafe {
        for lrp in [false, true] {
            let mut t = ptr::null_mut();
            let s = jc_trace_pair(m, clean.as_ptr(), corrupt.as_ptr(), 5, SCALE.as_ptr(), 5, lrp, &mut t);
            assert_eq!(s, JcStatus::JcOk, "{}", last_error());
            let n = jc_table_len(t);
            let lib = load_checkpoint(&fixture()).unwrap();
            assert_eq!(n, edge_universe(&lib.spec, 5).len());
            let mut prev = f64::INFINITY;
            let mut e = std::mem::zeroed::<JcEdge>();
            for r in 0..n {
                assert_eq!(jc_table_get(t, r, &mut e), JcStatus::JcOk);
                assert!(e.score.abs() <= prev);
                prev = e.score.abs();
                match e.kind {
                    JcEdgeKind::JcResidual => assert!(e.sender >= 0 && e.receiver > e.sender && e.layer == -1),
                    JcEdgeKind::JcAttnCross => assert!(e.head >= 0 && e.src <= e.dst && e.sender == -1),
                }
            }
            assert_eq!(jc_table_get(t, n, &mut e), JcStatus::JcOutOfRange);

            let path = tmp.path().join(format!("t{lrp}.csv"));
            let cpath = CString::new(path.to_str().unwrap()).unwrap();
            assert_eq!(jc_table_write_csv(t, cpath.as_ptr()), JcStatus::JcOk);
            let back = AttributionTable::read_csv(
                std::fs::File::open(&path).unwrap(),
                Provenance {
                    mode: String::new(),
                    task: String::new(),
                    seed: 0,
                },
            )
            .unwrap();
            assert_eq!(back.len(), n);
            jc_table_free(t);
        }
        jc_model_free(m);
    }
}

#[test]
fn bad_arguments_report_status_and_message() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(jc_model_load(ptr::null(), &mut m), JcStatus::JcNullArgument);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(jc_model_load(missing.as_ptr(), &mut m), JcStatus::JcArtifact);
        assert!(m.is_null());
        let mut ev = 0.0;
        assert_eq!(
            jc_expected_rating(ptr::null(), ptr::null(), 0, SCALE.as_ptr(), 5, &mut ev),
            JcStatus::JcNullArgument
        );
        assert_eq!(jc_table_len(ptr::null()), 0);
        jc_table_free(ptr::null_mut());
        jc_model_free(ptr::null_mut());
        let v = CStr::from_ptr(jc_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn cli_entry_point_returns_exit_codes() {
    let args: Vec<CString> = [
        "judgecirc",
        "lens",
        "--config",
        "/nonexistent.json",
        "--data",
        "/x",
        "--model",
        "/y",
    ]
    .iter()
    .map(|s| CString::new(*s).unwrap())
    .collect();
    let ptrs: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { jc_cli_main(ptrs.len(), ptrs.as_ptr()) }, 2);
    let help: Vec<CString> = ["judgecirc", "--help"]
        .iter()
        .map(|s| CString::new(*s).unwrap())
        .collect();
    let ptrs: Vec<_> = help.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { jc_cli_main(ptrs.len(), ptrs.as_ptr()) }, 0);
}

#[test]
fn generated_header_declares_the_abi_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/judgecirc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "JUDGECIRC_H",
        "typedef struct JcModel JcModel;",
        "typedef struct JcTable JcTable;",
        "JC_OK = 0",
        "JC_BUFFER_TOO_SMALL",
        "jc_model_load",
        "jc_forward_logits",
        "jc_trace_pair",
        "jc_table_get",
        "jc_cli_main",
        "jc_last_error",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // Compile a small C client against the header when a C compiler is available.
    let Ok(cc) = which("cc") else { return };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("client.c");
    std::fs::write(
        &src,
        r#"#include "judgecirc.h"
int main(void) {
    JcModel *m = 0;
    JcStatus s = jc_model_load("model.ckpt", &m);
    JcEdge e;
    (void)e;
    if (s != JC_OK) { return (int)s; }
    jc_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which(bin: &str) -> Result<PathBuf, ()> {
    std::env::var_os("PATH")
        .and_then(|p| std::env::split_paths(&p).map(|d| d.join(bin)).find(|p| p.is_file()))
        .ok_or(())
}
