#![allow(dead_code)]

use std::fs::File;
use std::path::PathBuf;

use egoqa_core::client::ScriptedClient;
use egoqa_core::extraction::{build_graph, fuse_captions, parse_captions_jsonl, BuildReport, Caption};
use egoqa_core::transcript::parse_utterances_jsonl;
use egoqa_core::{GraphStats, GraphStore, MCQItem, Stores, Utterance, VisualIndex};
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn captions() -> Vec<Caption> {
    let p = fixtures().join("corpus/captions.jsonl");
    parse_captions_jsonl(File::open(&p).unwrap(), "captions").unwrap()
}

pub fn utterances() -> Vec<Utterance> {
    let p = fixtures().join("corpus/utterances.jsonl");
    parse_utterances_jsonl(File::open(&p).unwrap(), "utterances").unwrap()
}

pub fn extraction_client() -> ScriptedClient {
    ScriptedClient::from_files(&[fixtures().join("corpus/extraction_script.json")]).unwrap()
}

pub fn qa_client() -> ScriptedClient {
    ScriptedClient::from_files(&[fixtures().join("qa/script.json")]).unwrap()
}

pub fn manifest_stats() -> GraphStats {
    let text = std::fs::read_to_string(fixtures().join("corpus/manifest.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    serde_json::from_value(v["stats"].clone()).unwrap()
}

pub fn expected() -> Value {
    let text = std::fs::read_to_string(fixtures().join("qa/expected.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn benchmark() -> Vec<MCQItem> {
    egoqa_core::eval::load_benchmark(fixtures().join("qa/benchmark.json")).unwrap()
}

pub fn build_corpus_graph(store: &GraphStore, max_in_flight: usize) -> BuildReport {
    let client = extraction_client();
    let utts = utterances();
    let docs = fuse_captions(&captions(), &utts, &client).unwrap();
    build_graph(&docs, &utts, &client, store, max_in_flight).unwrap()
}

/// In-memory stores holding the whole fixture corpus.
pub fn corpus_stores() -> Stores {
    let mut stores = Stores::in_memory(None).unwrap();
    stores.transcripts.add_utterances(utterances()).unwrap();
    let frames_path = fixtures().join("corpus/frames.jsonl");
    let frames = VisualIndex::parse_frames_jsonl(File::open(&frames_path).unwrap(), "frames").unwrap();
    let index = VisualIndex::in_memory(frames[0].embedding.len()).unwrap();
    index.add_frames(frames).unwrap();
    stores.frames = Some(index);
    build_corpus_graph(&stores.graph, 4);
    stores
}
pub mod oracle;
