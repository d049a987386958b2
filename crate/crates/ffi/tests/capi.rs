use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use semivqa_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    semivqa_string_free(p);
    s
}

fn last_error() -> String {
    let p = semivqa_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

const RECORDS: &str = concat!(
    r#"{"record_id":"r1","scene_id":"s1","images":{"CAM_FRONT":"f.jpg"},"question":"What is the moving status of the object <c1,CAM_FRONT,10,20>?","answer":"stopped","category":"perception","origin":"labeled","iteration":0,"s":1.000000}"#,
    "\n",
    r#"{"record_id":"r2","scene_id":"s1","images":{"CAM_FRONT":"f.jpg"},"question":"What should the ego vehicle do?","answer":"slow down","category":"planning","origin":"pseudo","iteration":1,"s":0.250000}"#,
    "\n"
);

#[test]
fn corpus_round_trips_through_handles() {
    unsafe {
        let mut corpus = ptr::null_mut();
        assert_eq!(semivqa_corpus_from_jsonl(c(RECORDS).as_ptr(), &mut corpus), SemivqaStatus::Ok, "{}", last_error_or_empty());
        let mut len = 0;
        assert_eq!(semivqa_corpus_len(corpus, &mut len), SemivqaStatus::Ok);
        assert_eq!(len, 2);

        let mut out = ptr::null_mut();
        assert_eq!(semivqa_corpus_to_jsonl(corpus, &mut out), SemivqaStatus::Ok);
        let jsonl = take(out);
        let mut again = ptr::null_mut();
        assert_eq!(semivqa_corpus_from_jsonl(c(&jsonl).as_ptr(), &mut again), SemivqaStatus::Ok);
        let (mut d1, mut d2) = (ptr::null_mut(), ptr::null_mut());
        semivqa_corpus_digest(corpus, &mut d1);
        semivqa_corpus_digest(again, &mut d2);
        assert_eq!(take(d1), take(d2));

        assert_eq!(semivqa_corpus_record_json(corpus, 5, &mut out), SemivqaStatus::OutOfRange);
        assert!(last_error().contains("index 5"));
        semivqa_corpus_free(corpus);
        semivqa_corpus_free(again);
    }
}

fn last_error_or_empty() -> String {
    let p = semivqa_last_error();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut corpus = ptr::null_mut();
        let bad = RECORDS.replace("\"CAM_FRONT\":\"f.jpg\"", "\"CAM_TOP\":\"f.jpg\"");
        assert_eq!(semivqa_corpus_from_jsonl(c(&bad).as_ptr(), &mut corpus), SemivqaStatus::Parse);
        assert!(last_error().contains("line 1"), "{}", last_error());
        assert!(corpus.is_null());

        assert_eq!(semivqa_corpus_from_jsonl(ptr::null(), &mut corpus), SemivqaStatus::NullArgument);
        let mut v = 0.0;
        assert_eq!(semivqa_bleu(c("a").as_ptr(), c("a").as_ptr(), 0, &mut v), SemivqaStatus::OutOfRange);
        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(semivqa_rouge_l(invalid.as_ptr().cast(), c("a").as_ptr(), &mut v), SemivqaStatus::InvalidUtf8);
        assert_eq!(semivqa_corpus_load(c("/nonexistent/x.jsonl").as_ptr(), false, &mut corpus), SemivqaStatus::Io);

        assert_eq!(semivqa_rouge_l(c("a b").as_ptr(), c("a b").as_ptr(), &mut v), SemivqaStatus::Ok);
        assert!(semivqa_last_error().is_null(), "success clears the error");
    }
}

#[test]
fn metrics_match_the_core() {
    unsafe {
        let mut v = 0.0;
        semivqa_bleu(c("the cat is on the mat").as_ptr(), c("the the the the").as_ptr(), 1, &mut v);
        assert!((v - semivqa::metrics::bleu_n("the cat is on the mat", "the the the the", 1)).abs() < 1e-15);
        semivqa_rouge_l(c("a b c d").as_ptr(), c("a c d").as_ptr(), &mut v);
        assert!((v - 0.8356).abs() < 5e-5);
        let (g, p) = ([c("stop now"), c("keep going")], [c("stop now"), c("slow down")]);
        let gp: Vec<*const c_char> = g.iter().map(|s| s.as_ptr()).collect();
        let pp: Vec<*const c_char> = p.iter().map(|s| s.as_ptr()).collect();
        assert_eq!(semivqa_cider(gp.as_ptr(), pp.as_ptr(), 2, &mut v), SemivqaStatus::Ok);
        let want = semivqa::metrics::cider(&[
            ("stop now".into(), "stop now".into()),
            ("keep going".into(), "slow down".into()),
        ]);
        assert_eq!(v, want);

        assert_eq!(semivqa_final_score(0.75, 72.86, 0.443, 36.61, 0.2, 0.4, 0.2, 0.2, &mut v), SemivqaStatus::Ok);
        assert!((v - 0.60326).abs() < 1e-5, "{v}");
        assert_eq!(
            semivqa_final_score(1.0, 100.0, 1.0, 100.0, 0.5, 0.5, 0.5, 0.5, &mut v),
            SemivqaStatus::InvalidArgument
        );

        semivqa_consistency(c("going ahead").as_ptr(), c("going ahead").as_ptr(), 1024, &mut v);
        assert_eq!(v, 1.0);
        semivqa_consistency(c("moving").as_ptr(), c("stationary").as_ptr(), 1024, &mut v);
        assert!(v < 0.5);
    }
}

const GRAPH: &str = r#"{"scene_id":"s","nodes":[
  {"id":"c1","camera":"CAM_FRONT","x":10.0,"y":20.0,"class":"car","attributions":{"visual_description":"white car","moving_status":"stopped"}},
  {"id":"c2","camera":"CAM_FRONT","x":60.0,"y":20.0,"class":"pedestrian","attributions":{}}],
  "edges":[{"from":"c1","to":"c2","pixel_distance":50.0,"features":{"direction":"right"}}]}"#;

#[test]
fn graph_handles_and_hints() {
    unsafe {
        let mut graph = ptr::null_mut();
        assert_eq!(semivqa_graph_from_json(c(GRAPH).as_ptr(), &mut graph), SemivqaStatus::Ok, "{}", last_error_or_empty());
        let (mut n, mut e) = (0, 0);
        semivqa_graph_counts(graph, &mut n, &mut e);
        assert_eq!((n, e), (2, 1));

        let mut out = ptr::null_mut();
        assert_eq!(
            semivqa_graph_hints(graph, c("c1").as_ptr(), c("moving_status").as_ptr(), ptr::null(), 4, 1, &mut out),
            SemivqaStatus::Ok
        );
        let hints = take(out);
        assert!(hints.starts_with("Consider the object <c1,CAM_FRONT,10,20> is a car"), "{hints}");
        assert!(hints.contains("white car") && hints.contains("right") && !hints.contains("stopped"), "{hints}");

        assert_eq!(
            semivqa_graph_hints(graph, c("c1").as_ptr(), c("direction").as_ptr(), c("c2").as_ptr(), 4, 1, &mut out),
            SemivqaStatus::Ok
        );
        let hints = take(out);
        assert!(!hints.contains("direction is right"), "{hints}");

        assert_eq!(
            semivqa_graph_hints(graph, c("c2").as_ptr(), c("direction").as_ptr(), c("c1").as_ptr(), 4, 1, &mut out),
            SemivqaStatus::Ok
        );
        take(out);
        let lone = r#"{"scene_id":"t","nodes":[{"id":"c1","camera":"CAM_BACK","x":1.0,"y":2.0,"class":"truck","attributions":{}}],"edges":[]}"#;
        let mut single = ptr::null_mut();
        semivqa_graph_from_json(c(lone).as_ptr(), &mut single);
        assert_eq!(
            semivqa_graph_hints(single, c("c1").as_ptr(), c("moving_status").as_ptr(), ptr::null(), 4, 1, &mut out),
            SemivqaStatus::EmptyPool
        );
        assert_eq!(
            semivqa_graph_hints(graph, c("c1").as_ptr(), c("colour").as_ptr(), ptr::null(), 4, 1, &mut out),
            SemivqaStatus::InvalidArgument
        );

        semivqa_graph_to_json(graph, &mut out);
        let json = take(out);
        let mut back = ptr::null_mut();
        assert_eq!(semivqa_graph_from_json(c(&json).as_ptr(), &mut back), SemivqaStatus::Ok);
        semivqa_graph_to_json(back, &mut out);
        assert_eq!(take(out), json);

        let bad = GRAPH.replacen("CAM_FRONT", "CAM_UP", 1);
        assert_eq!(semivqa_graph_from_json(c(&bad).as_ptr(), &mut back), SemivqaStatus::Parse);
        assert!(last_error().contains("nodes[0].camera"), "{}", last_error());

        semivqa_graph_free(graph);
        semivqa_graph_free(back);
        semivqa_graph_free(single);
    }
}

#[test]
fn object_refs_parse() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(semivqa_parse_object_ref(c("<c3,CAM_BACK,702.5,501.0>").as_ptr(), &mut out), SemivqaStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["id"], "c3");
        assert_eq!(v["camera"], "CAM_BACK");
        assert_eq!(v["x"], 702.5);
        assert_eq!(semivqa_parse_object_ref(c("<c3,CAM_BACK>").as_ptr(), &mut out), SemivqaStatus::Parse);
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

/// Compiles a C program against the generated header and the static
/// library. Skipped when no C compiler is installed.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libsemivqa_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
