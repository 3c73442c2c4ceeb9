//! Utterance store with BM25 lexical search and model-mediated whole-day
//! search.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock, Mutex, RwLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{CallKind, ClientRequest, ModelClient, Usage};
use crate::error::{Error, Result};
use crate::model::{AnalysisNote, Tool};
use crate::time::{DayTime, TimeInterval};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_CONTEXT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "UtteranceLine", into = "UtteranceLine")]
pub struct Utterance {
    pub utt_id: String,
    pub speaker: Option<String>,
    pub when: TimeInterval,
    pub text: String,
}

/// Ingestion line: `{utt_id, speaker?, day, start_t, end_t, text}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceLine {
    pub utt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub day: u32,
    pub start_t: u32,
    pub end_t: u32,
    pub text: String,
}

impl TryFrom<UtteranceLine> for Utterance {
    type Error = Error;

    fn try_from(l: UtteranceLine) -> Result<Self> {
        Ok(Utterance {
            utt_id: l.utt_id,
            speaker: l.speaker.filter(|s| !s.trim().is_empty()),
            when: TimeInterval::on_day(l.day, l.start_t, l.end_t)?,
            text: l.text,
        })
    }
}

impl From<Utterance> for UtteranceLine {
    fn from(u: Utterance) -> Self {
        UtteranceLine {
            utt_id: u.utt_id,
            speaker: u.speaker,
            day: u.when.start.day,
            start_t: u.when.start.time_hhmmss,
            end_t: u.when.end.time_hhmmss,
            text: u.text,
        }
    }
}

impl Utterance {
    pub fn new(utt_id: impl Into<String>, speaker: Option<&str>, when: TimeInterval, text: impl Into<String>) -> Self {
        Self {
            utt_id: utt_id.into(),
            speaker: speaker.map(String::from),
            when,
            text: text.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.utt_id.trim().is_empty() {
            return Err(Error::validation("utterance id is empty"));
        }
        if self.text.trim().is_empty() {
            return Err(Error::validation(format!("utterance {} has empty text", self.utt_id)));
        }
        self.when.validate()
    }

    /// `D2 15:50:21 Shure: Got it.`
    pub fn render_line(&self) -> String {
        match &self.speaker {
            Some(s) => format!("{} {}: {}", self.when.start, s, self.text),
            None => format!("{} {}", self.when.start, self.text),
        }
    }
}

/// Lowercased maximal runs of Unicode alphanumerics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// Non-negative BM25 IDF: `ln(1 + (N - df + 0.5) / (df + 0.5))`.
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalHit {
    pub utterance: Utterance,
    pub score: f64,
    /// Neighbouring utterances (time order, within the searched range),
    /// excluding the hit itself.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<Utterance>,
}

#[derive(Debug, Clone, Default)]
struct Index {
    docs: Vec<Utterance>,
    ids: HashSet<String>,
    doc_len: Vec<u32>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    total_len: u64,
    /// Doc indices sorted by (start, utt_id).
    by_time: Vec<u32>,
    time_rank: Vec<u32>,
}

impl Index {
    fn add(&mut self, u: Utterance) {
        let doc = self.docs.len() as u32;
        let tokens = tokenize(&u.text);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (term, n) in tf {
            self.postings.entry(term).or_default().push((doc, n));
        }
        self.doc_len.push(tokens.len() as u32);
        self.total_len += tokens.len() as u64;
        self.ids.insert(u.utt_id.clone());
        self.docs.push(u);
    }

    fn reorder(&mut self) {
        let docs = &self.docs;
        let mut order: Vec<u32> = (0..docs.len() as u32).collect();
        order.sort_by(|a, b| {
            let (x, y) = (&docs[*a as usize], &docs[*b as usize]);
            (x.when.start, &x.utt_id).cmp(&(y.when.start, &y.utt_id))
        });
        let mut rank = vec![0u32; docs.len()];
        for (r, d) in order.iter().enumerate() {
            rank[*d as usize] = r as u32;
        }
        self.by_time = order;
        self.time_rank = rank;
    }

    fn avgdl(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.docs.len() as f64
        }
    }
}

fn in_range(u: &Utterance, range: Option<(DayTime, DayTime)>) -> bool {
    range.is_none_or(|(from, to)| u.when.overlaps_range(from, to))
}

pub struct TranscriptStore {
    index: RwLock<Arc<Index>>,
    writer: Mutex<Option<File>>,
    path: Option<PathBuf>,
    params: Bm25Params,
}

impl Default for TranscriptStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl TranscriptStore {
    pub fn in_memory() -> Self {
        Self {
            index: RwLock::new(Arc::new(Index::default())),
            writer: Mutex::new(None),
            path: None,
            params: Bm25Params::default(),
        }
    }

    pub fn with_params(mut self, params: Bm25Params) -> Self {
        self.params = params;
        self
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Opens or creates a JSONL-backed store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let store = Self::in_memory();
        if path.exists() {
            let existing = parse_utterances_jsonl(File::open(&path)?, &path.display().to_string())?;
            store.add_utterances(existing)?;
        } else {
            File::create(&path)?;
        }
        *store.writer.lock().map_err(|_| Error::validation("transcript writer lock poisoned"))? =
            Some(OpenOptions::new().append(true).open(&path)?);
        Ok(Self {
            path: Some(path),
            ..store
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn snapshot(&self) -> Arc<Index> {
        self.index
            .read()
            .map(|g| Arc::clone(&g))
            .unwrap_or_else(|p| Arc::clone(&p.into_inner()))
    }

    pub fn len(&self) -> usize {
        self.snapshot().docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn avgdl(&self) -> f64 {
        self.snapshot().avgdl()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.snapshot().postings.get(term).map_or(0, Vec::len)
    }

    /// All utterances in time order.
    pub fn utterances(&self) -> Vec<Utterance> {
        let idx = self.snapshot();
        idx.by_time.iter().map(|d| idx.docs[*d as usize].clone()).collect()
    }

    /// Utterances of one day in time order, optionally capped at `until`.
    pub fn day_utterances(&self, day: u32, until: Option<DayTime>) -> Vec<Utterance> {
        let idx = self.snapshot();
        idx.by_time
            .iter()
            .map(|d| &idx.docs[*d as usize])
            .filter(|u| u.when.day() == day && until.is_none_or(|c| u.when.start <= c))
            .cloned()
            .collect()
    }

    pub fn days(&self) -> Vec<u32> {
        let mut days: Vec<u32> = self.snapshot().docs.iter().map(|u| u.when.day()).collect();
        days.sort_unstable();
        days.dedup();
        days
    }

    /// Adds a batch atomically; the whole batch is rejected on the first
    /// duplicate id or invalid utterance.
    pub fn add_utterances(&self, utterances: Vec<Utterance>) -> Result<usize> {
        let mut writer = self.writer.lock().map_err(|_| Error::validation("transcript writer lock poisoned"))?;
        let current = self.snapshot();
        let mut seen: HashSet<&str> = HashSet::new();
        for u in &utterances {
            u.validate()?;
            if current.ids.contains(&u.utt_id) || !seen.insert(u.utt_id.as_str()) {
                return Err(Error::DuplicateId(u.utt_id.clone()));
            }
        }
        if let Some(file) = writer.as_mut() {
            let mut buf = Vec::new();
            for u in &utterances {
                serde_json::to_writer(&mut buf, u)?;
                buf.push(b'\n');
            }
            file.write_all(&buf)?;
            file.flush()?;
        }
        let n = utterances.len();
        let mut next = current.as_ref().clone();
        drop(current);
        for u in utterances {
            next.add(u);
        }
        next.reorder();
        *self.index.write().map_err(|_| Error::validation("transcript index lock poisoned"))? = Arc::new(next);
        Ok(n)
    }

    /// Okapi BM25 over utterances intersecting `range`. Corpus statistics
    /// (N, df, avgdl) always cover the whole store. Only positive scores are
    /// returned; ties break by `(when, utt_id)`.
    pub fn bm25_search(&self, query: &str, range: Option<(DayTime, DayTime)>, k: usize) -> Result<Vec<LexicalHit>> {
        self.bm25_search_with_context(query, range, k, 0)
    }

    pub fn bm25_search_with_context(
        &self,
        query: &str,
        range: Option<(DayTime, DayTime)>,
        k: usize,
        context: usize,
    ) -> Result<Vec<LexicalHit>> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if let Some((from, to)) = range {
            if from > to {
                return Err(Error::validation(format!("range {from}..{to} is inverted")));
            }
        }
        let mut terms = tokenize(query);
        if terms.is_empty() {
            return Err(Error::validation("query has no searchable terms"));
        }
        let mut seen = HashSet::new();
        terms.retain(|t| seen.insert(t.clone()));

        let idx = self.snapshot();
        let n = idx.docs.len();
        let avgdl = idx.avgdl();
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(postings) = idx.postings.get(term) else { continue };
            let idf = bm25_idf(n, postings.len());
            for &(doc, tf) in postings {
                if !in_range(&idx.docs[doc as usize], range) {
                    continue;
                }
                let tf = tf as f64;
                let dl = idx.doc_len[doc as usize] as f64;
                let s = idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
                *scores.entry(doc).or_default() += s;
            }
        }
        let mut ranked: Vec<(f64, u32)> = scores.into_iter().filter(|(_, s)| *s > 0.0).map(|(d, s)| (s, d)).collect();
        ranked.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| idx.time_rank[a.1 as usize].cmp(&idx.time_rank[b.1 as usize]))
        });
        ranked.truncate(k);
        Ok(ranked
            .into_iter()
            .map(|(score, doc)| LexicalHit {
                utterance: idx.docs[doc as usize].clone(),
                score,
                context: neighbours(&idx, doc, context, range),
            })
            .collect())
    }

    /// Whole-day model search. Sends every utterance of `day` (up to
    /// `until`) with the task and working memory; the reply becomes the
    /// note. Citations that fail to parse are dropped, never an error.
    pub fn llm_search(
        &self,
        task: &str,
        memory: &str,
        day: u32,
        until: Option<DayTime>,
        client: &dyn ModelClient,
        key: Option<&str>,
    ) -> Result<(AnalysisNote, Usage)> {
        if until.is_some_and(|c| day > c.day) {
            return Err(Error::validation(format!("day {day} is after the query time")));
        }
        let utts = self.day_utterances(day, until);
        if utts.is_empty() {
            return Err(Error::validation(format!("no transcript for day {day}")));
        }
        let transcript: Vec<String> = utts.iter().map(Utterance::render_line).collect();
        let payload = json!({
            "task": task,
            "memory": memory,
            "day": day,
            "transcript": transcript.join("\n"),
        });
        let mut req = ClientRequest::new(CallKind::TranscriptLlmSearch, payload);
        if let Some(k) = key {
            req = req.with_key(k);
        }
        let resp = client.call(&req)?;
        let (summary, cited_timestamps) = parse_analysis_output(&resp.output, day);
        Ok((
            AnalysisNote {
                subtask_index: 0,
                tool: Tool::Audio,
                summary,
                cited_timestamps,
                cited_edges: Vec::new(),
                retrieved_count: utts.len(),
                error: None,
            },
            resp.usage,
        ))
    }

    /// [`Self::llm_search`] over several days concurrently, one call per day
    /// that has transcripts, results in ascending day order. The routing key
    /// of each call is `{key_prefix}@D{day}`.
    pub fn llm_search_days(
        &self,
        task: &str,
        memory: &str,
        days: &[u32],
        until: Option<DayTime>,
        client: &dyn ModelClient,
        key_prefix: Option<&str>,
    ) -> Result<Vec<(u32, AnalysisNote, Usage)>> {
        let available: HashSet<u32> = self.days().into_iter().collect();
        let mut days: Vec<u32> = days
            .iter()
            .copied()
            .filter(|d| available.contains(d) && until.is_none_or(|c| *d <= c.day))
            .collect();
        days.sort_unstable();
        days.dedup();
        days.par_iter()
            .map(|&day| {
                let key = key_prefix.map(|p| format!("{p}@D{day}"));
                let (note, usage) = self.llm_search(task, memory, day, until, client, key.as_deref())?;
                Ok((day, note, usage))
            })
            .collect()
    }
}

fn neighbours(idx: &Index, doc: u32, n: usize, range: Option<(DayTime, DayTime)>) -> Vec<Utterance> {
    if n == 0 {
        return Vec::new();
    }
    let rank = idx.time_rank[doc as usize] as usize;
    let day = idx.docs[doc as usize].when.day();
    let lo = rank.saturating_sub(n);
    let hi = (rank + n + 1).min(idx.by_time.len());
    (lo..hi)
        .filter(|r| *r != rank)
        .map(|r| &idx.docs[idx.by_time[r] as usize])
        .filter(|u| u.when.day() == day && in_range(u, range))
        .cloned()
        .collect()
}

pub fn parse_utterances_jsonl(input: impl Read, source_name: &str) -> Result<Vec<Utterance>> {
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
        let l: UtteranceLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(Utterance::try_from(l).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

static CITATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:\bD(\d{1,3})\s+)?\b(\d{1,2}):(\d{2}):(\d{2})\b").expect("citation regex"));

/// Extracts `D<d> HH:MM:SS` and bare `HH:MM:SS` citations (the latter on
/// `default_day`) in order of appearance, without duplicates. Malformed
/// times are skipped.
pub fn parse_citations(text: &str, default_day: u32) -> Vec<DayTime> {
    let mut out = Vec::new();
    for c in CITATION.captures_iter(text) {
        let num = |i: usize| c.get(i).and_then(|m| m.as_str().parse::<u32>().ok());
        let day = match c.get(1) {
            Some(_) => num(1),
            None => Some(default_day),
        };
        let (Some(day), Some(h), Some(m), Some(s)) = (day, num(2), num(3), num(4)) else {
            continue;
        };
        if let Ok(t) = DayTime::from_hms(day, h, m, s) {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

/// Reads a timestamp given as `"D2 15:50:21"`, `"15:50:21"` or
/// `{"day": 2, "t": 155021}`.
pub fn parse_timestamp_value(v: &Value, default_day: u32) -> Option<DayTime> {
    match v {
        Value::String(s) => parse_citations(s, default_day).into_iter().next(),
        Value::Object(_) => serde_json::from_value(v.clone()).ok(),
        _ => None,
    }
}

/// Splits a model analysis into summary text and cited timestamps. JSON
/// replies use `summary` and `timestamps`; anything else is treated as prose
/// and scanned for citations.
pub fn parse_analysis_output(output: &Value, default_day: u32) -> (String, Vec<DayTime>) {
    let structured = match output {
        Value::String(s) => crate::client::parse_json_lenient(s),
        other => Some(other.clone()),
    };
    if let Some(Value::Object(obj)) = &structured {
        if obj.contains_key("summary") || obj.contains_key("timestamps") {
            let summary = obj.get("summary").and_then(Value::as_str).unwrap_or("").to_string();
            let mut ts: Vec<DayTime> = Vec::new();
            for v in obj.get("timestamps").and_then(Value::as_array).into_iter().flatten() {
                if let Some(t) = parse_timestamp_value(v, default_day) {
                    if !ts.contains(&t) {
                        ts.push(t);
                    }
                }
            }
            if ts.is_empty() {
                ts = parse_citations(&summary, default_day);
            }
            return (summary, ts);
        }
    }
    let text = match output {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    let ts = parse_citations(&text, default_day);
    (text, ts)
}
