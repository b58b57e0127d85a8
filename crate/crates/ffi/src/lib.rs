// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the judgecirc toolkit.
//!
//! Objects cross the boundary as opaque handles (`JcModel`, `JcTable`) created and
//! released through this API. Every fallible call returns a [`JcStatus`]; the message
//! of the most recent failure on the calling thread is available from
//! [`jc_last_error`]. Panics are caught and reported as `JC_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use judgecirc::attribution::{
    peap_pair_scores, prepare_pair, AttributionTable, BackwardMode, EdgeRef, PeapOptions, Provenance,
};
use judgecirc::metrics::{expected_rating, RatingScale};
use judgecirc::model::{forward, load_checkpoint, InterventionPlan, Prompt, Transformer};
use judgecirc::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JcStatus {
    JcOk = 0,
    /// A required pointer argument was null.
    JcNullArgument = 1,
    /// Invalid configuration, argument or input.
    JcConfig = 2,
    /// Missing or unreadable file.
    JcArtifact = 3,
    /// Numeric failure (non-finite values, degenerate pair, undefined statistic).
    JcNumeric = 4,
    /// A string argument was not valid UTF-8.
    JcUtf8 = 5,
    /// An output buffer was too small.
    JcBufferTooSmall = 6,
    /// An index past the end of a table.
    JcOutOfRange = 7,
    /// Internal panic; the handle involved should be considered unusable.
    JcPanic = 8,
}

/// Edge kinds in [`JcEdge`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JcEdgeKind {
    JcResidual = 0,
    JcAttnCross = 1,
}

/// One attributed edge.
///
/// Residual edges use `sender`, `receiver` (canonical component indices: 0 is the
/// embedding, the last index the logits) and `position` (negative, right-aligned).
/// Cross-token edges use `layer`, `head`, `src` and `dst`. Unused fields are -1.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JcEdge {
    pub kind: JcEdgeKind,
    pub sender: i64,
    pub receiver: i64,
    pub position: i64,
    pub layer: i64,
    pub head: i64,
    pub src: i64,
    pub dst: i64,
    /// Mean score over pairs.
    pub score: f64,
    pub variance: f64,
    /// Number of pairs contributing.
    pub n: u64,
}

/// Opaque compiled model.
pub struct JcModel {
    inner: Transformer,
}

/// Opaque attribution table, ranked by descending absolute score.
pub struct JcTable {
    table: AttributionTable,
    ranked: Vec<JcEdge>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> JcStatus {
    match e.exit_code().0 {
        1 => JcStatus::JcConfig,
        2 => JcStatus::JcArtifact,
        _ => JcStatus::JcNumeric,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (JcStatus, String)>) -> JcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => JcStatus::JcOk,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            JcStatus::JcPanic
        }
    }
}

fn lib_err(e: Error) -> (JcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_err(what: &str) -> (JcStatus, String) {
    (JcStatus::JcNullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (JcStatus, String)> {
    if p.is_null() {
        return Err(null_err(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (JcStatus::JcUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (JcStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null_err(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null if none. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn jc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn jc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint written by `judgecirc train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jc_model_load(path: *const c_char, out: *mut *mut JcModel) -> JcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let path = str_arg(path, "path")?;
        let w = load_checkpoint(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(JcModel { inner: w.compile() }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`jc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jc_model_free(model: *mut JcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jc_model_vocab_size(model: *const JcModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.vocab_size)
}

/// Number of layers, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jc_model_n_layers(model: *const JcModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.n_layers)
}

/// Final-position logits of an unpatched forward pass. `out` receives
/// `jc_model_vocab_size(model)` values.
///
/// # Safety
/// `tokens` must hold `n_tokens` values and `out` `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn jc_forward_logits(
    model: *const JcModel,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f64,
    out_len: usize,
) -> JcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        let toks = slice_arg(tokens, n_tokens, "tokens")?;
        let v = m.inner.spec.vocab_size;
        if out.is_null() {
            return Err(null_err("out"));
        }
        if out_len < v {
            return Err((JcStatus::JcBufferTooSmall, format!("need {v} doubles, got {out_len}")));
        }
        let logits = forward(&m.inner, &Prompt::from(toks.to_vec()), &InterventionPlan::new()).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, v).copy_from_slice(logits.row(logits.rows - 1));
        Ok(())
    })
}

/// Expected rating `sum_r r * P(r)` over the given rating tokens (rating 1 first).
///
/// # Safety
/// Pointer arguments must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn jc_expected_rating(
    model: *const JcModel,
    tokens: *const u32,
    n_tokens: usize,
    scale: *const u32,
    n_scale: usize,
    out: *mut f64,
) -> JcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        let toks = slice_arg(tokens, n_tokens, "tokens")?;
        let scale = RatingScale::new(slice_arg(scale, n_scale, "scale")?.to_vec()).map_err(lib_err)?;
        let out = out.as_mut().ok_or_else(|| null_err("out"))?;
        let logits = forward(&m.inner, &Prompt::from(toks.to_vec()), &InterventionPlan::new()).map_err(lib_err)?;
        *out = expected_rating(logits.row(logits.rows - 1), &scale).map_err(lib_err)?;
        Ok(())
    })
}

fn to_c_edge(model: &Transformer, e: &EdgeRef, stat: &judgecirc::attribution::EdgeStat) -> JcEdge {
    let base = JcEdge {
        kind: JcEdgeKind::JcResidual,
        sender: -1,
        receiver: -1,
        position: -1,
        layer: -1,
        head: -1,
        src: -1,
        dst: -1,
        score: stat.mean,
        variance: stat.var,
        n: stat.n as u64,
    };
    match *e {
        EdgeRef::Residual {
            sender,
            receiver,
            position,
        } => JcEdge {
            sender: model.spec.index_of(sender) as i64,
            receiver: model.spec.index_of(receiver) as i64,
            position,
            ..base
        },
        EdgeRef::AttnCross { layer, head, src, dst } => JcEdge {
            kind: JcEdgeKind::JcAttnCross,
            layer: layer as i64,
            head: head as i64,
            src,
            dst,
            ..base
        },
    }
}

/// Edge attributions for one clean/corrupted pair (equal lengths), with the expected
/// rating over `scale` as the metric. `lrp` selects the default relevance rules instead
/// of exact gradients. No gap filter is applied.
///
/// # Safety
/// Pointer arguments must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jc_trace_pair(
    model: *const JcModel,
    clean: *const u32,
    corrupt: *const u32,
    n_tokens: usize,
    scale: *const u32,
    n_scale: usize,
    lrp: bool,
    out: *mut *mut JcTable,
) -> JcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null_err("model"))?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        let clean = slice_arg(clean, n_tokens, "clean")?.to_vec();
        let corrupt = slice_arg(corrupt, n_tokens, "corrupt")?.to_vec();
        let scale = RatingScale::new(slice_arg(scale, n_scale, "scale")?.to_vec()).map_err(lib_err)?;
        let run = prepare_pair(&m.inner, &clean.into(), &corrupt.into(), &scale).map_err(lib_err)?;
        let opts = PeapOptions {
            mode: if lrp {
                BackwardMode::Lrp(Default::default())
            } else {
                BackwardMode::Gradient
            },
            min_gap: 0.0,
            ..PeapOptions::default()
        };
        let provenance = Provenance {
            mode: opts.mode.name().into(),
            task: "ffi".into(),
            seed: 0,
        };
        let table = peap_pair_scores(&m.inner, &run, &scale, &opts, provenance).map_err(lib_err)?;
        let ranked = table
            .ranked(&m.inner.spec)
            .iter()
            .map(|(e, s)| to_c_edge(&m.inner, e, s))
            .collect();
        *out = Box::into_raw(Box::new(JcTable { table, ranked }));
        Ok(())
    })
}

/// Number of edges in a table (0 for null).
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jc_table_len(table: *const JcTable) -> usize {
    table.as_ref().map_or(0, |t| t.ranked.len())
}

/// The `rank`-th edge by descending absolute score.
///
/// # Safety
/// `table` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn jc_table_get(table: *const JcTable, rank: usize, out: *mut JcEdge) -> JcStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null_err("table"))?;
        let out = out.as_mut().ok_or_else(|| null_err("out"))?;
        *out = *t.ranked.get(rank).ok_or_else(|| {
            (
                JcStatus::JcOutOfRange,
                format!("rank {rank} past table of {} edges", t.ranked.len()),
            )
        })?;
        Ok(())
    })
}

/// Write the table as CSV (the same format `judgecirc trace` emits).
///
/// # Safety
/// `table` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn jc_table_write_csv(table: *const JcTable, path: *const c_char) -> JcStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null_err("table"))?;
        let path = str_arg(path, "path")?;
        let f = std::fs::File::create(path).map_err(|e| lib_err(e.into()))?;
        t.table.write_csv(std::io::BufWriter::new(f)).map_err(lib_err)
    })
}

/// Release a table. Null is ignored.
///
/// # Safety
/// `table` must come from [`jc_trace_pair`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn jc_table_free(table: *mut JcTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Run the command-line tool in-process; returns its exit code. `argv[0]` is the
/// program name.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn jc_cli_main(argc: usize, argv: *const *const c_char) -> i32 {
    let mut args = Vec::with_capacity(argc);
    if argc > 0 && argv.is_null() {
        set_error("`argv` is null".into());
        return 1;
    }
    for i in 0..argc {
        match str_arg(*argv.add(i), "argv") {
            Ok(s) => args.push(s.to_string()),
            Err((_, msg)) => {
                set_error(msg);
                return 1;
            }
        }
    }
    catch_unwind(|| judgecirc::cli::main_with_args(args)).unwrap_or_else(|_| {
        set_error("internal panic".into());
        3
    })
}
