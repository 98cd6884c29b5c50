//! C ABI for the graphsum pipeline.
//!
//! Conventions:
//! - Every fallible call returns a [`GsStatus`]; `GsStatusOk` is zero.
//! - On failure, `gs_last_error_message()` returns a thread-local,
//!   NUL-terminated description valid until the next failing call on that
//!   thread.
//! - Strings returned through `char **` out-parameters are owned by the
//!   caller and must be released with `gs_string_free`.
//! - `GsSummarizer` is an opaque handle created by `gs_summarizer_open` and
//!   released with `gs_summarizer_free`.
//!
//! The generated header lands in `include/graphsum.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use graphsum::error::Error;
use graphsum::evaluation::{rouge_l, rouge_n, RougeLMode};
use graphsum::graph::{build_graph, save_graph, GraphKind, LdaConfig};
use graphsum::inference::{summarize, DecodeConfig};
use graphsum::model::{ModelConfig, ModelParams};
use graphsum::text::{
    encode_instance, paragraph_token_lists, tokenize, EncodeCaps, RawInstance, Vocabulary,
};
use graphsum::training::load_checkpoint;

/// Call outcome. Non-zero values mirror the CLI exit-code families.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    GsStatusOk = 0,
    /// Null pointer or malformed UTF-8/argument.
    GsStatusInvalidArgument = 1,
    /// Input violates a documented invariant.
    GsStatusValidation = 3,
    /// Non-finite values or other numeric failures.
    GsStatusNumeric = 4,
    /// Filesystem or serialization failure.
    GsStatusIo = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> GsStatus {
    match err {
        Error::Shape(_) | Error::Config(_) | Error::Validation(_) | Error::Integrity(_) => {
            GsStatus::GsStatusValidation
        }
        Error::Numeric(_) => GsStatus::GsStatusNumeric,
        Error::Io(_) => GsStatus::GsStatusIo,
    }
}

fn fail(err: Error) -> GsStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn invalid(message: &str) -> GsStatus {
    set_error(message);
    GsStatus::GsStatusInvalidArgument
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, GsStatus> {
    if ptr.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

fn export_string(s: String, out: *mut *mut c_char) -> GsStatus {
    if out.is_null() {
        return invalid("output pointer is null");
    }
    match CString::new(s.replace('\0', " ")) {
        Ok(cs) => {
            unsafe { *out = cs.into_raw() };
            GsStatus::GsStatusOk
        }
        Err(_) => invalid("output string contained interior NUL"),
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn gs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Never null; empty
/// before the first failure.
#[no_mangle]
pub extern "C" fn gs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Frees a string returned through a `char **` out-parameter.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library.
#[no_mangle]
pub unsafe extern "C" fn gs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Precision/recall/F1 triples for every tracked ROUGE metric.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GsRougeScores {
    pub rouge1_precision: f64,
    pub rouge1_recall: f64,
    pub rouge1_f1: f64,
    pub rouge2_precision: f64,
    pub rouge2_recall: f64,
    pub rouge2_f1: f64,
    pub rouge_l_summary_precision: f64,
    pub rouge_l_summary_recall: f64,
    pub rouge_l_summary_f1: f64,
    pub rouge_l_sentence_precision: f64,
    pub rouge_l_sentence_recall: f64,
    pub rouge_l_sentence_f1: f64,
}

/// Scores a candidate summary against a reference (both raw UTF-8 text;
/// tokenization matches the pipeline's).
///
/// # Safety
/// `candidate` and `reference` must be valid NUL-terminated strings and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_rouge_score(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut GsRougeScores,
) -> GsStatus {
    let candidate = match utf8_arg(candidate, "candidate") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let reference = match utf8_arg(reference, "reference") {
        Ok(s) => s,
        Err(status) => return status,
    };
    if out.is_null() {
        return invalid("out is null");
    }
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    let r1 = match rouge_n(&cand, &refs, 1) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let r2 = match rouge_n(&cand, &refs, 2) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let ls = rouge_l(&cand, &refs, RougeLMode::Summary);
    let lt = rouge_l(&cand, &refs, RougeLMode::Sentence);
    *out = GsRougeScores {
        rouge1_precision: r1.precision,
        rouge1_recall: r1.recall,
        rouge1_f1: r1.f1,
        rouge2_precision: r2.precision,
        rouge2_recall: r2.recall,
        rouge2_f1: r2.f1,
        rouge_l_summary_precision: ls.precision,
        rouge_l_summary_recall: ls.recall,
        rouge_l_summary_f1: ls.f1,
        rouge_l_sentence_precision: lt.precision,
        rouge_l_sentence_recall: lt.recall,
        rouge_l_sentence_f1: lt.f1,
    };
    GsStatus::GsStatusOk
}

fn parse_instance(line: &str) -> Result<RawInstance, Error> {
    serde_json::from_str(line).map_err(|e| Error::Validation(format!("instance JSON: {e}")))
}

/// Builds a paragraph graph for one corpus instance and returns its JSON
/// (the graph-file schema). `graph_type` is one of
/// `similarity | topic | discourse`.
///
/// # Safety
/// `instance_json` and `graph_type` must be valid NUL-terminated strings;
/// `out_json` must be a valid pointer. Free the result with
/// `gs_string_free`.
#[no_mangle]
pub unsafe extern "C" fn gs_graph_build(
    instance_json: *const c_char,
    graph_type: *const c_char,
    seed: u64,
    out_json: *mut *mut c_char,
) -> GsStatus {
    let line = match utf8_arg(instance_json, "instance_json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind_text = match utf8_arg(graph_type, "graph_type") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind: GraphKind = match kind_text.parse() {
        Ok(k) => k,
        Err(e) => return fail(e),
    };
    let raw = match parse_instance(line) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let caps = EncodeCaps::default();
    let paragraphs = match paragraph_token_lists(&raw, &caps) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let lda = LdaConfig {
        seed,
        ..LdaConfig::default()
    };
    let graph = match build_graph(kind, &paragraphs, &lda, &Default::default()) {
        Ok(g) => g,
        Err(e) => return fail(e),
    };
    // Serialize through the shared file writer for one canonical schema.
    let dir = match scratch_dir() {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let path = dir.join(format!("graph-{seed}.json"));
    if let Err(e) = save_graph(&path, &graph, kind) {
        return fail(e);
    }
    let json = match std::fs::read_to_string(&path) {
        Ok(j) => j,
        Err(e) => return fail(Error::Io(e.to_string())),
    };
    let _ = std::fs::remove_file(&path);
    export_string(json, out_json)
}

fn scratch_dir() -> Result<std::path::PathBuf, Error> {
    let dir = std::env::temp_dir().join(format!("graphsum-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io(e.to_string()))?;
    Ok(dir)
}

/// Opaque summarizer: a loaded checkpoint (parameters, configuration,
/// vocabulary) ready to serve requests.
pub struct GsSummarizer {
    params: ModelParams,
    model_cfg: ModelConfig,
    vocab: Vocabulary,
}

/// Loads a checkpoint. Returns null on failure (see
/// `gs_last_error_message`).
///
/// # Safety
/// `checkpoint_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gs_summarizer_open(checkpoint_path: *const c_char) -> *mut GsSummarizer {
    let path = match utf8_arg(checkpoint_path, "checkpoint_path") {
        Ok(s) => s,
        Err(_) => return ptr::null_mut(),
    };
    match load_checkpoint(Path::new(path)) {
        Ok(state) => Box::into_raw(Box::new(GsSummarizer {
            params: state.params,
            model_cfg: state.model_cfg,
            vocab: state.vocab,
        })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Releases a summarizer handle.
///
/// # Safety
/// `handle` must be null or a pointer from `gs_summarizer_open`, not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn gs_summarizer_free(handle: *mut GsSummarizer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Summarizes one corpus instance (JSON line; the summary field may be
/// empty). The paragraph graph is built on the fly from `graph_type`. The
/// result is written to `out_summary`; free it with `gs_string_free`.
///
/// # Safety
/// `handle` must come from `gs_summarizer_open`; string arguments must be
/// valid NUL-terminated strings; `out_summary` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gs_summarizer_summarize(
    handle: *mut GsSummarizer,
    instance_json: *const c_char,
    graph_type: *const c_char,
    graph_seed: u64,
    beam: u32,
    alpha: f64,
    max_len: u32,
    min_len: u32,
    out_summary: *mut *mut c_char,
) -> GsStatus {
    if handle.is_null() {
        return invalid("summarizer handle is null");
    }
    let summarizer = &*handle;
    let line = match utf8_arg(instance_json, "instance_json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind_text = match utf8_arg(graph_type, "graph_type") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind: GraphKind = match kind_text.parse() {
        Ok(k) => k,
        Err(e) => return fail(e),
    };
    let raw = match parse_instance(line) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let caps = EncodeCaps {
        max_paragraphs: summarizer.model_cfg.max_paragraphs,
        max_tokens_per_paragraph: summarizer.model_cfg.max_tokens_per_paragraph,
        max_summary_tokens: summarizer.model_cfg.max_summary_tokens,
    };
    let paragraphs = match paragraph_token_lists(&raw, &caps) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let lda = LdaConfig {
        seed: graph_seed,
        ..LdaConfig::default()
    };
    let graph = match build_graph(kind, &paragraphs, &lda, &Default::default()) {
        Ok(g) => g,
        Err(e) => return fail(e),
    };
    let instance = match encode_instance(&raw, &summarizer.vocab, &caps, false) {
        Ok(i) => i,
        Err(e) => return fail(e),
    };
    let decode = DecodeConfig {
        beam: beam as usize,
        alpha,
        max_len: max_len as usize,
        min_len: min_len as usize,
        trigram_blocking: true,
    };
    match summarize(
        &summarizer.params,
        &summarizer.model_cfg,
        &summarizer.vocab,
        &instance,
        &graph,
        &decode,
    ) {
        Ok(text) => export_string(text, out_summary),
        Err(e) => fail(e),
    }
}
