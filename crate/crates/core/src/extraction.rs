//! Entity-graph construction: caption/transcript fusion, per-document
//! extraction, temporal annotation and aggregation into the store.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{CallKind, ClientRequest, ModelClient, Usage};
use crate::error::{Error, Result};
use crate::graph::{GraphStats, GraphStore, RelationEdge};
use crate::model::{EntityRef, EntityType, RelationType};
use crate::time::{DayTime, TimeInterval};
use crate::transcript::Utterance;

/// Caption window as ingested: `{doc_id, day, start_t, end_t, text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub doc_id: String,
    pub day: u32,
    pub start_t: u32,
    pub end_t: u32,
    pub text: String,
}

impl Caption {
    pub fn interval(&self) -> Result<TimeInterval> {
        TimeInterval::on_day(self.day, self.start_t, self.end_t)
    }
}

pub fn parse_captions_jsonl(input: impl Read, source_name: &str) -> Result<Vec<Caption>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source_name.to_string(),
            line: i + 1,
            message,
        };
        let c: Caption = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        c.interval().map_err(|e| err(e.to_string()))?;
        out.push(c);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub day: u32,
    pub interval: TimeInterval,
    pub caption_text: String,
    /// Ids of utterances intersecting the window, in time order.
    pub utterance_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawEdge {
    pub source: EntityRef,
    pub target: EntityRef,
    pub rel: RelationType,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub nodes: Vec<EntityRef>,
    pub raw_edges: Vec<RawEdge>,
    /// One entry per dropped or repaired item.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Pairs each caption window with the utterances that intersect it
/// (half-open) and asks the client for the fused text.
///
/// Captions must be ordered and non-overlapping within each day; doc ids
/// must be unique.
pub fn fuse_captions(captions: &[Caption], utterances: &[Utterance], client: &dyn ModelClient) -> Result<Vec<Document>> {
    let windows = validate_captions(captions)?;
    let by_day = DayUtterances::new(utterances);
    captions
        .par_iter()
        .zip(windows.par_iter())
        .map(|(c, window)| {
            let members = by_day.intersecting(window);
            let payload = json!({
                "caption": {"doc_id": c.doc_id, "day": c.day, "start_t": c.start_t, "end_t": c.end_t, "text": c.text},
                "utterances": members.iter().map(|u| json!({
                    "utt_id": u.utt_id,
                    "speaker": u.speaker,
                    "when": u.when.start.to_string(),
                    "text": u.text,
                })).collect::<Vec<_>>(),
            });
            let req = ClientRequest::new(CallKind::Fuse, payload).with_key(c.doc_id.clone());
            let fused = client.call(&req)?.text();
            Ok(Document {
                doc_id: c.doc_id.clone(),
                day: c.day,
                interval: *window,
                caption_text: fused,
                utterance_ids: members.iter().map(|u| u.utt_id.clone()).collect(),
            })
        })
        .collect()
}

fn validate_captions(captions: &[Caption]) -> Result<Vec<TimeInterval>> {
    let mut ids = HashSet::new();
    let mut windows = Vec::with_capacity(captions.len());
    for c in captions {
        if !ids.insert(c.doc_id.as_str()) {
            return Err(Error::DuplicateId(c.doc_id.clone()));
        }
        windows.push(c.interval()?);
    }
    for pair in windows.windows(2).zip(captions.windows(2)) {
        let ([a, b], [ca, cb]) = pair else { continue };
        if b.start < a.start {
            return Err(Error::validation(format!("caption {} starts before {}", cb.doc_id, ca.doc_id)));
        }
        if a.day() == b.day() && b.second_span().0 < a.second_span().1 {
            return Err(Error::validation(format!("captions {} and {} overlap", ca.doc_id, cb.doc_id)));
        }
    }
    Ok(windows)
}

/// Utterances bucketed per day and sorted by start second, for window
/// membership lookups.
struct DayUtterances<'a> {
    days: HashMap<u32, (Vec<&'a Utterance>, u32)>,
}

impl<'a> DayUtterances<'a> {
    fn new(utterances: &'a [Utterance]) -> Self {
        let mut days: HashMap<u32, (Vec<&Utterance>, u32)> = HashMap::new();
        for u in utterances {
            let (s, e) = u.when.second_span();
            let slot = days.entry(u.when.day()).or_default();
            slot.0.push(u);
            slot.1 = slot.1.max(e - s);
        }
        for (list, _) in days.values_mut() {
            list.sort_by(|a, b| (a.when.start, &a.utt_id).cmp(&(b.when.start, &b.utt_id)));
        }
        Self { days }
    }

    fn intersecting(&self, window: &TimeInterval) -> Vec<&'a Utterance> {
        let Some((list, max_len)) = self.days.get(&window.day()) else {
            return Vec::new();
        };
        let (ws, we) = window.second_span();
        let lo = list.partition_point(|u| u.when.second_span().0 + max_len < ws);
        let hi = list.partition_point(|u| u.when.second_span().0 < we);
        list[lo..hi].iter().copied().filter(|u| u.when.intersects(window)).collect()
    }
}

/// Merges consecutive documents falling in the same day and hour into one
/// (caption texts joined, window hulled, utterances unioned).
pub fn batch_by_hour(docs: &[Document]) -> Vec<Document> {
    let mut out: Vec<Document> = Vec::new();
    for d in docs {
        let hour = d.interval.start.time_hhmmss / 10000;
        match out.last_mut() {
            Some(last) if last.day == d.day && last.interval.start.time_hhmmss / 10000 == hour => {
                last.interval.end = last.interval.end.max(d.interval.end);
                last.caption_text = format!("{}\n{}", last.caption_text, d.caption_text);
                for u in &d.utterance_ids {
                    if !last.utterance_ids.contains(u) {
                        last.utterance_ids.push(u.clone());
                    }
                }
            }
            _ => {
                let mut first = d.clone();
                first.doc_id = format!("D{}h{:02}", d.day, hour);
                out.push(first);
            }
        }
    }
    out
}

fn doc_payload(doc: &Document) -> Value {
    json!({
        "doc_id": doc.doc_id,
        "day": doc.day,
        "start_t": doc.interval.start.time_hhmmss,
        "end_t": doc.interval.end.time_hhmmss,
        "text": doc.caption_text,
    })
}

/// Runs the extractor on one document. Out-of-vocabulary types and
/// malformed items are dropped with a warning; relationship endpoints
/// missing from the node list are added to it.
pub fn extract_document_graph(doc: &Document, client: &dyn ModelClient) -> Result<(ExtractionResult, Usage)> {
    let mut payload = doc_payload(doc);
    payload["allowed_nodes"] = json!(EntityType::ALL.iter().map(|t| t.as_str()).collect::<Vec<_>>());
    payload["allowed_relationships"] = json!(RelationType::ALL.iter().map(|r| r.as_str()).collect::<Vec<_>>());
    let req = ClientRequest::new(CallKind::Extract, payload).with_key(doc.doc_id.clone());
    let resp = client.call(&req)?;
    let result = match resp.json() {
        Some(v) => parse_extraction(&v),
        None => ExtractionResult {
            warnings: vec![format!("{}: extractor reply is not JSON", doc.doc_id)],
            ..Default::default()
        },
    };
    for w in &result.warnings {
        debug!("{}: {w}", doc.doc_id);
    }
    Ok((result, resp.usage))
}

/// Lenient reading of `{"nodes": [...], "relationships": [...]}`.
pub fn parse_extraction(v: &Value) -> ExtractionResult {
    let mut res = ExtractionResult::default();
    let mut known: HashMap<String, EntityType> = HashMap::new();

    let node_of = |v: &Value| -> std::result::Result<EntityRef, String> {
        let id = v
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("node without id: {v}"))?;
        let etype = v
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("node {id} has no type"))?;
        let etype = EntityType::parse_lenient(etype).map_err(|e| format!("node {id}: {e}"))?;
        EntityRef::new(id, etype).map_err(|e| e.to_string())
    };

    for n in v.get("nodes").and_then(Value::as_array).into_iter().flatten() {
        match node_of(n) {
            Ok(node) => {
                if !res.nodes.contains(&node) {
                    known.entry(node.id.clone()).or_insert(node.etype);
                    res.nodes.push(node);
                }
            }
            Err(w) => res.warnings.push(w),
        }
    }

    let rels = v
        .get("relationships")
        .or_else(|| v.get("edges"))
        .and_then(Value::as_array)
        .into_iter()
        .flatten();
    for r in rels {
        let endpoint = |key: &str| -> std::result::Result<EntityRef, String> {
            match r.get(key) {
                Some(obj @ Value::Object(_)) => node_of(obj),
                Some(Value::String(id)) => {
                    let etype = match r.get(format!("{key}_type")).and_then(Value::as_str) {
                        Some(t) => EntityType::parse_lenient(t).map_err(|e| format!("{key} {id}: {e}"))?,
                        None => *known.get(id).ok_or_else(|| format!("{key} {id} has no type"))?,
                    };
                    EntityRef::new(id.clone(), etype).map_err(|e| e.to_string())
                }
                _ => Err(format!("relationship without {key}: {r}")),
            }
        };
        let parsed = (|| {
            let source = endpoint("source")?;
            let target = endpoint("target")?;
            let rel = r
                .get("type")
                .or_else(|| r.get("rel"))
                .and_then(Value::as_str)
                .ok_or_else(|| format!("relationship without type: {r}"))?;
            let rel = RelationType::parse_lenient(rel).map_err(|e| e.to_string())?;
            Ok::<_, String>(RawEdge { source, target, rel })
        })();
        match parsed {
            Ok(edge) => {
                for end in [&edge.source, &edge.target] {
                    if !res.nodes.contains(end) {
                        res.warnings.push(format!("added missing endpoint {} ({})", end.id, end.etype));
                        res.nodes.push(end.clone());
                    }
                }
                if !res.raw_edges.contains(&edge) {
                    res.raw_edges.push(edge);
                }
            }
            Err(w) => res.warnings.push(w),
        }
    }
    res
}

/// Turns raw edges into stored edges. Cited utterances are grouped into
/// runs of neighbours in the document's utterance order; each run yields
/// one edge spanning the hull of its utterances with their texts as
/// evidence. Edges with no valid citation (or when the annotator fails)
/// take the document window and empty evidence.
pub fn annotate_temporal(
    res: &ExtractionResult,
    doc: &Document,
    utterances: &[Utterance],
    client: &dyn ModelClient,
) -> (Vec<RelationEdge>, Vec<String>, Usage) {
    let mut warnings = Vec::new();
    let mut usage = Usage::default();
    if res.raw_edges.is_empty() {
        return (Vec::new(), warnings, usage);
    }
    let mut doc_utts: Vec<&Utterance> = utterances
        .iter()
        .filter(|u| doc.utterance_ids.contains(&u.utt_id))
        .collect();
    doc_utts.sort_by(|a, b| (a.when.start, &a.utt_id).cmp(&(b.when.start, &b.utt_id)));
    let position: HashMap<&str, usize> = doc_utts.iter().enumerate().map(|(i, u)| (u.utt_id.as_str(), i)).collect();

    let mut citations: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    if !doc_utts.is_empty() {
        let mut payload = doc_payload(doc);
        payload["utterances"] = json!(doc_utts
            .iter()
            .map(|u| json!({"utt_id": u.utt_id, "speaker": u.speaker, "when": u.when.to_string(), "text": u.text}))
            .collect::<Vec<_>>());
        payload["edges"] = json!(res
            .raw_edges
            .iter()
            .enumerate()
            .map(|(i, e)| json!({"edge": i, "source": e.source.id, "target": e.target.id, "rel": e.rel.as_str()}))
            .collect::<Vec<_>>());
        let req = ClientRequest::new(CallKind::Annotate, payload).with_key(doc.doc_id.clone());
        match client.call(&req) {
            Ok(resp) => {
                usage = resp.usage;
                let list = resp.json().and_then(|v| match v {
                    Value::Array(a) => Some(a),
                    Value::Object(mut o) => o.remove("annotations").and_then(|a| a.as_array().cloned()),
                    _ => None,
                });
                for a in list.into_iter().flatten() {
                    let Some(i) = a.get("edge").and_then(Value::as_u64).map(|i| i as usize) else {
                        warnings.push(format!("annotation without edge index: {a}"));
                        continue;
                    };
                    if i >= res.raw_edges.len() {
                        warnings.push(format!("annotation for unknown edge {i}"));
                        continue;
                    }
                    let ids = a.get("utterance_ids").or_else(|| a.get("utterances")).and_then(Value::as_array);
                    for id in ids.into_iter().flatten().filter_map(Value::as_str) {
                        match position.get(id) {
                            Some(p) => {
                                citations.entry(i).or_default().insert(*p);
                            }
                            None => warnings.push(format!("edge {i} cites {id}, which is not in {}", doc.doc_id)),
                        }
                    }
                }
            }
            Err(e) => warnings.push(format!("annotation failed, using caption windows: {e}")),
        }
    }

    let mut edges = Vec::new();
    for (i, raw) in res.raw_edges.iter().enumerate() {
        let cited = citations.get(&i).map(|s| s.iter().copied().collect::<Vec<_>>()).unwrap_or_default();
        if cited.is_empty() {
            edges.push(RelationEdge::new(raw.source.clone(), raw.target.clone(), raw.rel, doc.interval, ""));
            continue;
        }
        for run in contiguous_runs(&cited) {
            let members: Vec<&Utterance> = run.iter().map(|p| doc_utts[*p]).collect();
            let start: DayTime = members.iter().map(|u| u.when.start).min().unwrap_or(doc.interval.start);
            let end: DayTime = members.iter().map(|u| u.when.end).max().unwrap_or(doc.interval.end);
            let evidence = members.iter().map(|u| u.text.trim()).collect::<Vec<_>>().join(" ");
            edges.push(RelationEdge::new(
                raw.source.clone(),
                raw.target.clone(),
                raw.rel,
                TimeInterval { start, end },
                evidence,
            ));
        }
    }
    for w in &warnings {
        debug!("{}: {w}", doc.doc_id);
    }
    (edges, warnings, usage)
}

/// Splits sorted positions into maximal runs of consecutive integers.
fn contiguous_runs(sorted: &[usize]) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for &p in sorted {
        match runs.last_mut() {
            Some(run) if run.last().is_some_and(|l| l + 1 == p) => run.push(p),
            _ => runs.push(vec![p]),
        }
    }
    runs
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub stats: GraphStats,
    pub documents: usize,
    pub inserted: usize,
    pub duplicates: usize,
    pub rejected: usize,
    /// Documents whose extraction failed, with the reason.
    pub doc_errors: Vec<(String, String)>,
    pub warnings: usize,
    pub usage: Usage,
}

/// Extracts and annotates every document with at most `max_in_flight`
/// documents in progress, then inserts the edges in document order.
/// Documents that fail extraction are reported and skipped.
pub fn build_graph(
    docs: &[Document],
    utterances: &[Utterance],
    client: &dyn ModelClient,
    store: &GraphStore,
    max_in_flight: usize,
) -> Result<BuildReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    let by_id: HashMap<&str, &Utterance> = utterances.iter().map(|u| (u.utt_id.as_str(), u)).collect();

    type DocOutcome = std::result::Result<(Vec<RelationEdge>, usize, Usage), String>;
    let outcomes: Vec<DocOutcome> = pool.install(|| {
        docs.par_iter()
            .map(|doc| {
                let doc_utts: Vec<Utterance> = doc
                    .utterance_ids
                    .iter()
                    .filter_map(|id| by_id.get(id.as_str()).map(|u| (*u).clone()))
                    .collect();
                let (res, u1) = extract_document_graph(doc, client).map_err(|e| e.to_string())?;
                let (edges, warnings, u2) = annotate_temporal(&res, doc, &doc_utts, client);
                Ok((edges, res.warnings.len() + warnings.len(), add_usage(u1, u2)))
            })
            .collect()
    });

    let mut report = BuildReport {
        documents: docs.len(),
        ..Default::default()
    };
    let mut all_edges = Vec::new();
    for (doc, outcome) in docs.iter().zip(outcomes) {
        match outcome {
            Ok((edges, warnings, usage)) => {
                all_edges.extend(edges);
                report.warnings += warnings;
                report.usage = add_usage(report.usage, usage);
            }
            Err(e) => report.doc_errors.push((doc.doc_id.clone(), e)),
        }
    }
    let ins = store.insert_edges(&all_edges)?;
    report.inserted = ins.inserted;
    report.duplicates = ins.duplicates;
    report.rejected = ins.rejected.len();
    report.stats = store.stats();
    Ok(report)
}

fn add_usage(a: Usage, b: Usage) -> Usage {
    Usage {
        prompt_tokens: a.prompt_tokens + b.prompt_tokens,
        completion_tokens: a.completion_tokens + b.completion_tokens,
        image_count: a.image_count + b.image_count,
        estimated: a.estimated || b.estimated,
    }
}
