use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

fn egoqa(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egoqa"))
        .arg("--store")
        .arg(store)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ingest_corpus(store: &Path) -> Output {
    egoqa(
        store,
        &[
            "ingest",
            "--utterances",
            &fx("corpus/utterances.jsonl"),
            "--captions",
            &fx("corpus/captions.jsonl"),
            "--frames",
            &fx("corpus/frames.jsonl"),
        ],
    )
}

/// Ingested and extracted fixture store.
fn built_store() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ingest_corpus(dir.path())), 0);
    let o = egoqa(dir.path(), &["extract-graph", "--script", &fx("corpus/extraction_script.json")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn stats_json(out: &str) -> Value {
    serde_json::from_str(&out[out.find('{').unwrap()..]).unwrap()
}

#[test]
fn ingest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let first = ingest_corpus(dir.path());
    assert_eq!(code(&first), 0);
    assert!(stdout(&first).contains("utterances: 39 new of 39"));
    assert!(stdout(&first).contains("frames: 300 new of 300"));
    let again = ingest_corpus(dir.path());
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("utterances: 0 new of 39"));
    assert!(stdout(&again).contains("captions: 0 new of 20"));
    assert!(stdout(&again).contains("frames: 0 new of 300"));
}

#[test]
fn malformed_line_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(fixtures().join("corpus/utterances.jsonl")).unwrap();
    let mut lines: Vec<&str> = src.lines().collect();
    lines[6] = r#"{"utt_id": "bad", "day": 1, "start_t": 126000, "end_t": 126001, "text": "x"}"#;
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    let o = egoqa(&dir.path().join("store"), &["ingest", "--utterances", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(":7:"), "{}", stderr(&o));
    assert!(!dir.path().join("store").join("utterances.jsonl").exists());
}

#[test]
fn extraction_matches_manifest_and_repeats() {
    let dir = built_store();
    let manifest: Value = serde_json::from_str(&fs::read_to_string(fixtures().join("corpus/manifest.json")).unwrap()).unwrap();
    let stats = stats_json(&stdout(&egoqa(dir.path(), &["graph", "stats"])));
    assert_eq!(stats, manifest["stats"]);
    let again = egoqa(dir.path(), &["extract-graph", "--script", &fx("corpus/extraction_script.json"), "--jobs", "1"]);
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("inserted 0"));
    assert_eq!(stats_json(&stdout(&again)), manifest["stats"]);
}

#[test]
fn empty_corpus_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let utts = dir.path().join("u.jsonl");
    fs::write(&utts, "").unwrap();
    assert_eq!(code(&egoqa(dir.path(), &["ingest", "--utterances", utts.to_str().unwrap()])), 0);
    assert_eq!(code(&egoqa(dir.path(), &["extract-graph"])), 1);
}

#[test]
fn missing_store_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = egoqa(&dir.path().join("nope"), &["graph", "stats"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn answers_the_whiteboard_question() {
    let dir = built_store();
    let trace = dir.path().join("fig5.json");
    let o = egoqa(
        dir.path(),
        &[
            "answer",
            "--benchmark",
            &fx("qa/benchmark.json"),
            "--qid",
            "fig5",
            "--script",
            &fx("qa/script.json"),
            "--trace",
            trace.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "B. Alice");
    let t: Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["state"]["plan"].as_array().unwrap().len(), 5);
    assert_eq!(t["state"]["working_memory"].as_array().unwrap().len(), 5);
}

#[test]
fn llm_transcript_search_cites_the_reply() {
    let dir = built_store();
    let trace = dir.path().join("llm.json");
    let o = egoqa(
        dir.path(),
        &[
            "answer",
            "--benchmark",
            &fx("qa/benchmark.json"),
            "--qid",
            "fig5",
            "--script",
            &fx("qa/script.json"),
            "--tsearch",
            "llm",
            "--trace",
            trace.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t: Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    let audio = &t["state"]["working_memory"][2];
    assert_eq!(audio["tool"], "Audio");
    assert_eq!(audio["cited_timestamps"][1], serde_json::json!({"day": 2, "t": 155021}));
}

#[test]
fn bad_query_time_shows_usage() {
    let dir = built_store();
    let o = egoqa(dir.path(), &["answer", "--question", "q", "--candidates", "a|b|c|d", "--query-time", "3 12:00"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn ad_hoc_question_without_script_falls_back() {
    let dir = built_store();
    let trace = dir.path().join("t.json");
    let o = egoqa(
        dir.path(),
        &[
            "answer",
            "--question",
            "Where is the red cup?",
            "--candidates",
            "kitchen|yard|bedroom|living room",
            "--query-time",
            "D3 12:00:00",
            "--trace",
            trace.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(trace.exists());
}

fn eval(store: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["eval", "--script"];
    let script = fx("qa/script.json");
    let bench = fx("qa/benchmark.json");
    args.push(&script);
    args.push(&bench);
    args.extend_from_slice(extra);
    egoqa(store, &args)
}

#[test]
fn eval_report_matches_hand_counts() {
    let dir = built_store();
    let expected: Value = serde_json::from_str(&fs::read_to_string(fixtures().join("qa/expected.json")).unwrap()).unwrap();
    let report = dir.path().join("report.json");
    let o = eval(dir.path(), &["--report", report.to_str().unwrap(), "--recall-windows", "10,3600"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["accuracy"]["overall"]["correct"], expected["correct"]);
    assert_eq!(r["accuracy"]["overall"]["percent"], expected["overall_percent"]);
    for (cat, pct) in expected["per_category_percent"].as_object().unwrap() {
        assert_eq!(r["accuracy"]["per_category"][cat]["percent"], *pct, "{cat}");
    }
    assert_eq!(r["recall"].as_array().unwrap().len(), 2);
    assert!(stdout(&o).contains("10s") && stdout(&o).contains("3600s"));
}

#[test]
fn eval_is_job_count_invariant() {
    let dir = built_store();
    let (a, b) = (dir.path().join("j1.jsonl"), dir.path().join("j8.jsonl"));
    assert_eq!(code(&eval(dir.path(), &["--jobs", "1", "--traces", a.to_str().unwrap()])), 0);
    assert_eq!(code(&eval(dir.path(), &["--jobs", "8", "--traces", b.to_str().unwrap()])), 0);
    let (a, b) = (fs::read(a).unwrap(), fs::read(b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn tool_subsets_mark_contributing_tools() {
    let dir = built_store();
    for (tools, want) in [
        ("eg", vec!["EntityGraph"]),
        ("visual", vec!["Visual"]),
        ("audio", vec!["Audio"]),
        ("visual,audio", vec!["Visual", "Audio"]),
        ("eg,visual,audio", vec!["EntityGraph", "Visual", "Audio"]),
    ] {
        let report = dir.path().join(format!("{tools}.json"));
        let o = eval(dir.path(), &["--tools", tools, "--report", report.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{tools}: {}", stderr(&o));
        let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r["items"], 10);
        assert_eq!(r["tools_contributing"], serde_json::json!(want), "{tools}");
    }
}

#[test]
fn image_token_rate_presets() {
    let dir = built_store();
    let mut image_tokens = Vec::new();
    for rate in ["85", "258"] {
        let report = dir.path().join(format!("r{rate}.json"));
        let o = eval(dir.path(), &["--image-token-rate", rate, "--report", report.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        let t = &r["tokens"];
        let rate: u64 = rate.parse().unwrap();
        assert_eq!(t["image_tokens"].as_u64().unwrap(), t["image_count"].as_u64().unwrap() * rate);
        image_tokens.push(t["image_tokens"].as_u64().unwrap());
    }
    assert!(image_tokens[0] > 0 && image_tokens[0] < image_tokens[1]);
    assert_eq!(code(&eval(dir.path(), &["--image-token-rate", "0"])), 2);
}

#[test]
fn empty_benchmark_is_an_input_error() {
    let dir = built_store();
    let empty = dir.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    assert_eq!(code(&egoqa(dir.path(), &["eval", empty.to_str().unwrap()])), 2);
    fs::write(&empty, "[{\"qid\": 1}]").unwrap();
    assert_eq!(code(&egoqa(dir.path(), &["eval", empty.to_str().unwrap()])), 2);
}

#[test]
fn record_then_replay_is_byte_identical() {
    let dir = built_store();
    let cassette = dir.path().join("cassette.jsonl");
    let (rec, rep) = (dir.path().join("rec.json"), dir.path().join("rep.json"));
    let common = ["answer", "--benchmark", &fx("qa/benchmark.json"), "--qid", "fig5"].map(String::from);
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = common.iter().map(String::as_str).collect();
        args.extend_from_slice(extra);
        egoqa(dir.path(), &args)
    };
    let script = fx("qa/script.json");
    let o = run(&["--client", "record", "--script", &script, "--cassette", cassette.to_str().unwrap(), "--trace", rec.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["--client", "replay", "--cassette", cassette.to_str().unwrap(), "--trace", rep.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&rec).unwrap(), fs::read(&rep).unwrap());

    // An empty cassette serves nothing: the run degrades to the fallback.
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = run(&["--client", "replay", "--cassette", empty.to_str().unwrap(), "--trace", rep.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(&["--client", "replay"])), 2);
}

#[test]
fn graph_export_import_round_trip() {
    let dir = built_store();
    let export = dir.path().join("edges.jsonl");
    assert_eq!(code(&egoqa(dir.path(), &["graph", "export", export.to_str().unwrap()])), 0);
    let other = tempfile::tempdir().unwrap();
    let o = egoqa(other.path(), &["graph", "import", export.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("inserted 44"));
    let o = egoqa(other.path(), &["graph", "import", export.to_str().unwrap()]);
    assert!(stdout(&o).contains("inserted 0  duplicates 44"));
    let a = stats_json(&stdout(&egoqa(dir.path(), &["graph", "stats"])));
    let b = stats_json(&stdout(&egoqa(other.path(), &["graph", "stats"])));
    assert_eq!(a, b);
}

#[test]
fn index_frames_checks_dimension() {
    let dir = built_store();
    let o = egoqa(dir.path(), &["index-frames", "--dim", "16", &fx("corpus/frames.jsonl")]);
    assert_eq!(code(&o), 2);
    let o = egoqa(dir.path(), &["index-frames", "--dim", "8", &fx("corpus/frames.jsonl")]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 new of 300"));
}
