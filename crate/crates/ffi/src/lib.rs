//! C interface to the semivqa core.
//!
//! Every function returns a [`SemivqaStatus`]; results come back through
//! out-pointers. On failure the message is kept per thread and can be read
//! with [`semivqa_last_error`]. Strings handed out by the library must be
//! released with [`semivqa_string_free`], handles with their own `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use semivqa::datasets::{self, VqaRecord};
use semivqa::metrics::{self, Components, FinalScoreWeights, MetricsConfig, SurrogateJudge};
use semivqa::model_client::hash_embed;
use semivqa::scene_graph::{self, retrieve_hints_from, AttributionKind, EdgeKind, HintSources, HintTarget, SceneGraph};
use semivqa::scr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemivqaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    Io = 5,
    OutOfRange = 6,
    EmptyPool = 7,
    Panic = 99,
}

/// A loaded set of records.
pub struct SemivqaCorpus {
    records: Vec<VqaRecord>,
}

/// A validated scene graph.
pub struct SemivqaGraph {
    graph: SceneGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SemivqaStatus, String);

impl Failure {
    fn new(status: SemivqaStatus, message: impl std::fmt::Display) -> Self {
        Failure(status, message.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SemivqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SemivqaStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SemivqaStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a nul-terminated string valid for the call.
unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(SemivqaStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(SemivqaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// # Safety
/// `out` is null or valid for a write.
unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(SemivqaStatus::NullArgument, "output pointer is null"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure::new(SemivqaStatus::InvalidArgument, e))?;
    put(out, c.into_raw())
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(SemivqaStatus::NullArgument, format!("{name} is null")))
}

fn dataset_failure(e: datasets::DatasetError) -> Failure {
    let status = match e {
        datasets::DatasetError::Io { .. } => SemivqaStatus::Io,
        _ => SemivqaStatus::Parse,
    };
    Failure::new(status, e)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn semivqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn semivqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn semivqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses JSONL records.
///
/// # Safety
/// `jsonl` is a nul-terminated string; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_corpus_from_jsonl(jsonl: *const c_char, out: *mut *mut SemivqaCorpus) -> SemivqaStatus {
    guard(|| {
        let records = datasets::from_jsonl(text(jsonl, "jsonl")?).map_err(dataset_failure)?;
        put(out, Box::into_raw(Box::new(SemivqaCorpus { records })))
    })
}

/// Reads a JSONL file, or a DriveLM-style JSON file when `labeled` is true.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_corpus_load(path: *const c_char, labeled: bool, out: *mut *mut SemivqaCorpus) -> SemivqaStatus {
    guard(|| {
        let path = Path::new(text(path, "path")?);
        let records = if labeled { datasets::load_labeled(path) } else { datasets::read_jsonl(path) }
            .map_err(dataset_failure)?;
        put(out, Box::into_raw(Box::new(SemivqaCorpus { records })))
    })
}

/// # Safety
/// `corpus` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn semivqa_corpus_free(corpus: *mut SemivqaCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` is a live handle; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_corpus_len(corpus: *const SemivqaCorpus, out: *mut usize) -> SemivqaStatus {
    guard(|| put(out, handle(corpus, "corpus")?.records.len()))
}

/// Record `index` as one JSON line.
///
/// # Safety
/// `corpus` is a live handle; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_corpus_record_json(
    corpus: *const SemivqaCorpus,
    index: usize,
    out: *mut *mut c_char,
) -> SemivqaStatus {
    guard(|| {
        let records = &handle(corpus, "corpus")?.records;
        let r = records
            .get(index)
            .ok_or_else(|| Failure::new(SemivqaStatus::OutOfRange, format!("index {index} of {}", records.len())))?;
        let line = datasets::to_jsonl(std::slice::from_ref(r)).map_err(dataset_failure)?;
        put_string(out, String::from_utf8(line).expect("json is UTF-8").trim_end().to_string())
    })
}

/// The whole corpus in canonical JSONL.
///
/// # Safety
/// `corpus` is a live handle; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_corpus_to_jsonl(corpus: *const SemivqaCorpus, out: *mut *mut c_char) -> SemivqaStatus {
    guard(|| {
        let bytes = datasets::to_jsonl(&handle(corpus, "corpus")?.records).map_err(dataset_failure)?;
        put_string(out, String::from_utf8(bytes).expect("json is UTF-8"))
    })
}

/// SHA-256 of the canonical JSONL, hex encoded.
///
/// # Safety
/// `corpus` is a live handle; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_corpus_digest(corpus: *const SemivqaCorpus, out: *mut *mut c_char) -> SemivqaStatus {
    guard(|| {
        let digest = datasets::digest(&handle(corpus, "corpus")?.records).map_err(dataset_failure)?;
        put_string(out, digest)
    })
}

/// Evaluates predictions against ground truth with the default weights
/// and the surrogate judge; writes the report as JSON.
///
/// # Safety
/// Both handles are live; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_evaluate(
    gt: *const SemivqaCorpus,
    pred: *const SemivqaCorpus,
    out: *mut *mut c_char,
) -> SemivqaStatus {
    guard(|| {
        let (gt, pred) = (handle(gt, "gt")?, handle(pred, "pred")?);
        let report = metrics::evaluate(&gt.records, &pred.records, &MetricsConfig::default(), &SurrogateJudge::default())
            .map_err(|e| Failure::new(SemivqaStatus::InvalidArgument, e))?;
        put_string(out, serde_json::to_string(&report).expect("report serializes"))
    })
}

/// # Safety
/// `json` is a nul-terminated string; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_graph_from_json(json: *const c_char, out: *mut *mut SemivqaGraph) -> SemivqaStatus {
    guard(|| {
        let graph = SceneGraph::from_json(text(json, "json")?).map_err(|e| Failure::new(SemivqaStatus::Parse, e))?;
        put(out, Box::into_raw(Box::new(SemivqaGraph { graph })))
    })
}

/// # Safety
/// `graph` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn semivqa_graph_free(graph: *mut SemivqaGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// # Safety
/// `graph` is a live handle; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_graph_to_json(graph: *const SemivqaGraph, out: *mut *mut c_char) -> SemivqaStatus {
    guard(|| put_string(out, handle(graph, "graph")?.graph.to_json()))
}

/// # Safety
/// `graph` is a live handle; the out-pointers are valid for writes.
#[no_mangle]
pub unsafe extern "C" fn semivqa_graph_counts(
    graph: *const SemivqaGraph,
    nodes: *mut usize,
    edges: *mut usize,
) -> SemivqaStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.graph;
        put(nodes, g.nodes.len())?;
        put(edges, g.edges.len())
    })
}

fn parse_target(target: &str, peer: Option<&str>) -> Result<HintTarget, Failure> {
    if let Some(kind) = AttributionKind::ALL.into_iter().find(|k| k.as_str() == target) {
        return Ok(HintTarget::Attribution(kind));
    }
    if let Some(kind) = EdgeKind::ALL.into_iter().find(|k| k.as_str() == target) {
        let peer = peer.ok_or_else(|| Failure::new(SemivqaStatus::NullArgument, "edge targets need a peer id"))?;
        return Ok(HintTarget::Edge { kind, peer: peer.to_string() });
    }
    Err(Failure::new(SemivqaStatus::InvalidArgument, format!("unknown target {target:?}")))
}

/// Samples up to `k` hints about `node_id` for a question on `target`
/// (an attribution or relation name; relations also need `peer_id`, which
/// may otherwise be null) and writes the rendered hint sentence.
///
/// # Safety
/// `graph` is a live handle; strings are nul-terminated or, for
/// `peer_id`, null; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_graph_hints(
    graph: *const SemivqaGraph,
    node_id: *const c_char,
    target: *const c_char,
    peer_id: *const c_char,
    k: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> SemivqaStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.graph;
        let node = text(node_id, "node_id")?;
        let peer = if peer_id.is_null() { None } else { Some(text(peer_id, "peer_id")?) };
        let target = parse_target(text(target, "target")?, peer)?;
        let set = retrieve_hints_from(g, node, &target, k, seed, HintSources::AttributionsAndEdges).map_err(|e| {
            let status = match e {
                scene_graph::GraphError::EmptyPool => SemivqaStatus::EmptyPool,
                _ => SemivqaStatus::InvalidArgument,
            };
            Failure::new(status, e)
        })?;
        put_string(out, set.rendered)
    })
}

/// Parses `<id,CAM,x,y>` and writes it back as JSON.
///
/// # Safety
/// `reference` is a nul-terminated string; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_parse_object_ref(reference: *const c_char, out: *mut *mut c_char) -> SemivqaStatus {
    guard(|| {
        let r = scene_graph::parse_object_ref(text(reference, "reference")?)
            .map_err(|e| Failure::new(SemivqaStatus::Parse, e))?;
        let json = serde_json::json!({ "id": r.id, "camera": r.camera.to_string(), "x": r.x, "y": r.y });
        put_string(out, json.to_string())
    })
}

/// Consistency of two answers under the hash embedder: clamp(cos, 0, 1).
///
/// # Safety
/// Strings are nul-terminated; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_consistency(
    a: *const c_char,
    b: *const c_char,
    dim: usize,
    out: *mut f64,
) -> SemivqaStatus {
    guard(|| {
        if dim < 64 {
            return Err(Failure::new(SemivqaStatus::InvalidArgument, "dim must be at least 64"));
        }
        let (a, b) = (hash_embed(text(a, "a")?, dim), hash_embed(text(b, "b")?, dim));
        let cos = scr::cosine(&a, &b).map_err(|e| Failure::new(SemivqaStatus::InvalidArgument, e))?;
        put(out, cos.clamp(0.0, 1.0))
    })
}

/// Sentence BLEU-`n`, `n` in 1..=4.
///
/// # Safety
/// Strings are nul-terminated; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_bleu(gt: *const c_char, pred: *const c_char, n: u32, out: *mut f64) -> SemivqaStatus {
    guard(|| {
        if !(1..=4).contains(&n) {
            return Err(Failure::new(SemivqaStatus::OutOfRange, format!("BLEU order {n}")));
        }
        put(out, metrics::bleu_n(text(gt, "gt")?, text(pred, "pred")?, n as usize))
    })
}

/// # Safety
/// Strings are nul-terminated; `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_rouge_l(gt: *const c_char, pred: *const c_char, out: *mut f64) -> SemivqaStatus {
    guard(|| put(out, metrics::rouge_l(text(gt, "gt")?, text(pred, "pred")?)))
}

/// CIDEr over `len` parallel arrays of sentences.
///
/// # Safety
/// `gt` and `pred` point to `len` nul-terminated strings each.
#[no_mangle]
pub unsafe extern "C" fn semivqa_cider(
    gt: *const *const c_char,
    pred: *const *const c_char,
    len: usize,
    out: *mut f64,
) -> SemivqaStatus {
    guard(|| {
        if len > 0 && (gt.is_null() || pred.is_null()) {
            return Err(Failure::new(SemivqaStatus::NullArgument, "sentence arrays are null"));
        }
        let mut corpus = Vec::with_capacity(len);
        for i in 0..len {
            corpus.push((text(*gt.add(i), "gt[i]")?.to_string(), text(*pred.add(i), "pred[i]")?.to_string()));
        }
        put(out, metrics::cider(&corpus))
    })
}

/// Final score with explicit weights. `judge` and `match_score` are on
/// the 0-100 scale, the others on 0-1.
///
/// # Safety
/// `out` is valid for a write.
#[no_mangle]
pub unsafe extern "C" fn semivqa_final_score(
    accuracy: f64,
    judge: f64,
    language: f64,
    match_score: f64,
    w_accuracy: f64,
    w_judge: f64,
    w_language: f64,
    w_match: f64,
    out: *mut f64,
) -> SemivqaStatus {
    guard(|| {
        let weights = FinalScoreWeights { w_accuracy, w_judge, w_language, w_match, ..Default::default() };
        let c = Components { accuracy, judge, language, match_score };
        let v = metrics::final_score(c, &weights).map_err(|e| Failure::new(SemivqaStatus::InvalidArgument, e))?;
        put(out, v)
    })
}
