//! Question-answering state machine: plan → (route → retrieve → analyze →
//! grade)* → answer, with every model call going through [`ModelClient`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{CallKind, ClientError, ClientRequest, ClientResponse, ModelClient, Usage};
use crate::error::{Error, Result};
use crate::eval::{oracle_context, MCQItem, OracleContext};
use crate::graph::{GraphQueryIntent, DEFAULT_MAX_ROWS};
use crate::model::{AnalysisNote, Tool};
use crate::stores::Stores;
use crate::time::DayTime;
use crate::transcript::{parse_analysis_output, DEFAULT_CONTEXT};
use crate::visual::{FrameFilter, DEFAULT_K_TOTAL, MAX_QUERIES};

pub const MAX_SUBTASKS: usize = 5;
/// Per-image token costs for low- and high-detail image inputs.
pub const IMAGE_TOKEN_RATE_LOW: u64 = 85;
pub const IMAGE_TOKEN_RATE_HIGH: u64 = 258;
pub const DEFAULT_BM25_K: usize = 20;
pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptVariant {
    #[default]
    Bm25,
    Llm,
}

impl FromStr for TranscriptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bm25" => Ok(Self::Bm25),
            "llm" => Ok(Self::Llm),
            other => Err(Error::validation(format!("unknown transcript search variant {other:?}"))),
        }
    }
}

impl fmt::Display for TranscriptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bm25 => "bm25",
            Self::Llm => "llm",
        })
    }
}

/// Source of phase timings. `Frozen` reports zero durations so traces from
/// scripted or replayed runs are byte-identical.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Clock {
    Wall,
    #[default]
    Frozen,
}

impl Clock {
    fn now(&self) -> Option<Instant> {
        match self {
            Clock::Wall => Some(Instant::now()),
            Clock::Frozen => None,
        }
    }

    fn since(&self, start: Option<Instant>) -> f64 {
        start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    /// Tools the planner may use.
    pub tools: BTreeSet<Tool>,
    pub tsearch: TranscriptVariant,
    pub k_total: usize,
    pub bm25_k: usize,
    pub bm25_context: usize,
    pub ladder_max_rows: usize,
    pub image_token_rate: u64,
    pub clock: Clock,
    /// Replace visual windows and transcript days with the item's gold
    /// neighbourhood.
    pub oracle: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            tools: Tool::ALL.into_iter().collect(),
            tsearch: TranscriptVariant::Bm25,
            k_total: DEFAULT_K_TOTAL,
            bm25_k: DEFAULT_BM25_K,
            bm25_context: DEFAULT_CONTEXT,
            ladder_max_rows: DEFAULT_MAX_ROWS,
            image_token_rate: IMAGE_TOKEN_RATE_LOW,
            clock: Clock::Frozen,
            oracle: false,
        }
    }
}

/// Parses `eg,visual,audio` (any spelling accepted by [`Tool::parse_lenient`]).
pub fn parse_tool_list(s: &str) -> Result<BTreeSet<Tool>> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.insert(Tool::parse_lenient(part).ok_or_else(|| Error::validation(format!("unknown tool {part:?}")))?);
    }
    if out.is_empty() {
        return Err(Error::validation("tool list is empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualArgs {
    pub queries: Vec<String>,
    pub windows: Vec<FrameFilter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioArgs {
    pub task: String,
    pub variant: TranscriptVariant,
    /// Days searched by the whole-day variant.
    pub days: Vec<u32>,
    /// Range searched by the lexical variant.
    pub range: (DayTime, DayTime),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolArgs {
    Graph(GraphQueryIntent),
    Visual(VisualArgs),
    Audio(AudioArgs),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    /// 1-based.
    pub index: usize,
    pub description: String,
    pub tool: Tool,
    pub args: ToolArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: CallKind,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub image_count: u64,
    pub estimated: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub image_count: u64,
    pub image_tokens: u64,
    pub total_tokens: u64,
    pub calls: u64,
}

impl LedgerTotals {
    pub fn add(&mut self, other: &LedgerTotals) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.image_count += other.image_count;
        self.image_tokens += other.image_tokens;
        self.total_tokens += other.total_tokens;
        self.calls += other.calls;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub image_token_rate: u64,
    pub entries: Vec<LedgerEntry>,
    pub totals: LedgerTotals,
}

impl TokenLedger {
    pub fn new(image_token_rate: u64) -> Self {
        Self {
            image_token_rate,
            entries: Vec::new(),
            totals: LedgerTotals::default(),
        }
    }

    pub fn record(&mut self, kind: CallKind, usage: Usage) {
        let e = LedgerEntry {
            kind,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            image_count: usage.image_count,
            estimated: usage.estimated,
        };
        self.totals.add(&self.totals_of(std::slice::from_ref(&e)));
        self.entries.push(e);
    }

    fn totals_of(&self, entries: &[LedgerEntry]) -> LedgerTotals {
        let mut t = LedgerTotals::default();
        for e in entries {
            t.prompt_tokens += e.prompt_tokens;
            t.completion_tokens += e.completion_tokens;
            t.image_count += e.image_count;
            t.calls += 1;
        }
        t.image_tokens = t.image_count * self.image_token_rate;
        t.total_tokens = t.prompt_tokens + t.completion_tokens + t.image_tokens;
        t
    }

    /// Totals recomputed from the entries.
    pub fn recompute(&self) -> LedgerTotals {
        self.totals_of(&self.entries)
    }

    pub fn by_kind(&self) -> BTreeMap<CallKind, LedgerTotals> {
        let mut out: BTreeMap<CallKind, Vec<LedgerEntry>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.kind).or_default().push(*e);
        }
        out.into_iter().map(|(k, v)| (k, self.totals_of(&v))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Completion {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Planned {
        steps: usize,
        tools: Vec<Tool>,
    },
    PlanWarning {
        message: String,
    },
    PlanningFailed {
        reason: String,
    },
    Executed {
        index: usize,
        handler: String,
        retrieved: usize,
        cited_timestamps: usize,
        cited_edges: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Graded {
        after: usize,
        verdict: Completion,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    EarlyExit {
        after: usize,
        skipped: usize,
    },
    Answered {
        choice: usize,
        fallback: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

/// Wall-clock seconds per phase (zeros under [`Clock::Frozen`]).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub planning_s: f64,
    pub retrieval_s: BTreeMap<Tool, f64>,
    pub analysis_s: BTreeMap<Tool, f64>,
    pub grading_s: f64,
    pub answering_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub qid: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub query_time: DayTime,
    pub plan: Vec<SubTask>,
    /// Number of sub-tasks executed so far.
    pub current: usize,
    pub working_memory: Vec<AnalysisNote>,
    pub answer: Option<usize>,
    pub token_ledger: TokenLedger,
    pub timings: PhaseTimes,
    pub trace: Vec<TraceEvent>,
}

impl AgentState {
    pub fn new(qid: &str, question: &str, candidates: &[String], query_time: DayTime, image_token_rate: u64) -> Self {
        Self {
            qid: qid.to_string(),
            question: question.to_string(),
            candidates: candidates.to_vec(),
            query_time,
            plan: Vec::new(),
            current: 0,
            working_memory: Vec::new(),
            answer: None,
            token_ledger: TokenLedger::new(image_token_rate),
            timings: PhaseTimes::default(),
            trace: Vec::new(),
        }
    }

    /// Working memory as prompt text, one note per line.
    pub fn memory_text(&self) -> String {
        self.working_memory
            .iter()
            .map(|n| {
                let mut line = format!("[{}] ({}) {}", n.subtask_index, n.tool, n.summary.trim());
                if !n.cited_timestamps.is_empty() {
                    let ts: Vec<String> = n.cited_timestamps.iter().map(|t| t.to_string()).collect();
                    line.push_str(&format!(" | times: {}", ts.join(", ")));
                }
                if !n.cited_edges.is_empty() {
                    let es: Vec<String> = n.cited_edges.iter().map(|e| e.to_string()).collect();
                    line.push_str(&format!(" | edges: {}", es.join(", ")));
                }
                if let Some(e) = &n.error {
                    line.push_str(&format!(" | error: {e}"));
                }
                line
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn call(&mut self, client: &dyn ModelClient, req: &ClientRequest) -> std::result::Result<ClientResponse, ClientError> {
        let resp = client.call(req)?;
        let mut usage = resp.usage;
        usage.image_count = usage.image_count.max(req.image_count);
        self.token_ledger.record(req.kind, usage);
        Ok(resp)
    }

    fn step_key(&self, index: usize) -> String {
        format!("{}#{}", self.qid, index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub qid: String,
    pub choice: usize,
    pub letter: String,
    pub fallback: bool,
    pub early_exit: bool,
    pub state: AgentState,
}

impl AnswerTrace {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

/// Handler id for a sub-task's tool.
pub fn route(subtask: &SubTask) -> &'static str {
    subtask.tool.handler_id()
}

// ---------------------------------------------------------------- planning

/// Lowers planner output into sub-tasks. Steps with an unknown or disabled
/// tool, or arguments that do not lower, are dropped; the rest are
/// renumbered and capped at [`MAX_SUBTASKS`]. Returns the sub-tasks and one
/// warning per dropped or truncated item.
pub fn lower_plan(
    output: &Value,
    query_time: DayTime,
    config: &AgentConfig,
    oracle: Option<&OracleContext>,
) -> (Vec<SubTask>, Vec<String>) {
    let mut warnings = Vec::new();
    let steps: Vec<Value> = match output {
        Value::Array(a) => a.clone(),
        Value::Object(o) => o
            .get("steps")
            .or_else(|| o.get("plan"))
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default(),
        Value::String(s) => match crate::client::parse_json_lenient(s) {
            Some(v) if !v.is_string() => return lower_plan(&v, query_time, config, oracle),
            _ => Vec::new(),
        },
        _ => Vec::new(),
    };
    let mut out = Vec::new();
    for (i, step) in steps.iter().enumerate() {
        let tool_name = step.get("tool").and_then(Value::as_str).unwrap_or("");
        let Some(tool) = Tool::parse_lenient(tool_name) else {
            warnings.push(format!("step {}: unknown tool {tool_name:?} dropped", i + 1));
            continue;
        };
        if !config.tools.contains(&tool) {
            warnings.push(format!("step {}: tool {tool} is disabled", i + 1));
            continue;
        }
        let description = step
            .get("description")
            .or_else(|| step.get("task"))
            .and_then(Value::as_str)
            .unwrap_or("")
            .trim()
            .to_string();
        let empty = json!({});
        let args = step.get("args").unwrap_or(&empty);
        match lower_args(tool, args, &description, query_time, config, oracle) {
            Ok(args) => out.push(SubTask {
                index: 0,
                description,
                tool,
                args,
            }),
            Err(e) => warnings.push(format!("step {}: {e}", i + 1)),
        }
    }
    if out.len() > MAX_SUBTASKS {
        warnings.push(format!("plan had {} steps; truncated to {MAX_SUBTASKS}", out.len()));
        out.truncate(MAX_SUBTASKS);
    }
    for (i, s) in out.iter_mut().enumerate() {
        s.index = i + 1;
    }
    (out, warnings)
}

fn lower_args(
    tool: Tool,
    args: &Value,
    description: &str,
    query_time: DayTime,
    config: &AgentConfig,
    oracle: Option<&OracleContext>,
) -> Result<ToolArgs> {
    match tool {
        Tool::EntityGraph => Ok(ToolArgs::Graph(GraphQueryIntent::from_args(args, query_time)?)),
        Tool::Visual => {
            let mut queries: Vec<String> = match args.get("queries").or_else(|| args.get("query")) {
                Some(Value::Array(a)) => a.iter().filter_map(Value::as_str).map(String::from).collect(),
                Some(Value::String(s)) => vec![s.clone()],
                _ => Vec::new(),
            };
            queries.retain(|q| !q.trim().is_empty());
            queries.truncate(MAX_QUERIES);
            let windows = match oracle {
                Some(o) => o.frame_windows.clone(),
                None => lower_windows(args, query_time)?,
            };
            Ok(ToolArgs::Visual(VisualArgs { queries, windows }))
        }
        Tool::Audio => {
            let task = args
                .get("task")
                .and_then(Value::as_str)
                .filter(|s| !s.trim().is_empty())
                .unwrap_or(description)
                .to_string();
            if task.trim().is_empty() {
                return Err(Error::validation("audio step has no task"));
            }
            let time = |k: &str| -> Result<Option<DayTime>> {
                match args.get(k) {
                    None | Some(Value::Null) => Ok(None),
                    Some(v) => serde_json::from_value::<DayTime>(v.clone())
                        .map(Some)
                        .map_err(|e| Error::validation(format!("bad {k}: {e}"))),
                }
            };
            let from = time("from")?.unwrap_or(DayTime::start_of_day(1));
            let to = time("to")?.map_or(query_time, |t| t.min(query_time));
            if from > to {
                return Err(Error::validation(format!("audio range {from}..{to} is empty")));
            }
            let mut days: Vec<u32> = match args.get("days").and_then(Value::as_array) {
                Some(a) => a.iter().filter_map(Value::as_u64).map(|d| d as u32).collect(),
                None => (from.day..=to.day).collect(),
            };
            let mut range = (from, to);
            if let Some(o) = oracle {
                days = o.transcript_days.clone();
                if let (Some(first), Some(last)) = (days.first(), days.last()) {
                    range = (DayTime::start_of_day(*first), DayTime::end_of_day(*last).min(query_time));
                }
            }
            days.retain(|d| *d >= 1 && *d <= query_time.day);
            days.sort_unstable();
            days.dedup();
            Ok(ToolArgs::Audio(AudioArgs {
                task,
                variant: config.tsearch,
                days,
                range,
            }))
        }
    }
}

fn lower_windows(args: &Value, query_time: DayTime) -> Result<Vec<FrameFilter>> {
    let cap = Some(query_time);
    let Some(list) = args.get("windows").and_then(Value::as_array) else {
        return Ok(vec![FrameFilter {
            day: args.get("day").and_then(Value::as_u64).map(|d| d as u32),
            location: args.get("location").and_then(Value::as_str).map(String::from),
            before: cap,
            ..Default::default()
        }]);
    };
    let mut out = Vec::new();
    for w in list {
        let num = |k: &str| w.get(k).and_then(Value::as_u64).map(|n| n as u32);
        let time_range = match (num("t_ge"), num("t_le")) {
            (None, None) => None,
            (lo, hi) => Some((lo.unwrap_or(0), hi.unwrap_or(crate::time::MAX_HHMMSS))),
        };
        let f = FrameFilter {
            day: num("day"),
            time_range,
            location: w.get("location").and_then(Value::as_str).map(String::from),
            before: cap,
        };
        f.validate()?;
        out.push(f);
    }
    if out.is_empty() {
        out.push(FrameFilter {
            before: cap,
            ..Default::default()
        });
    }
    Ok(out)
}

/// Asks the planner for sub-tasks. On failure the plan stays empty and the
/// reason is in the trace.
pub fn plan(state: &mut AgentState, client: &dyn ModelClient, config: &AgentConfig, oracle: Option<&OracleContext>) -> Result<()> {
    let started = config.clock.now();
    let letters: Vec<String> = state
        .candidates
        .iter()
        .zip(LETTERS)
        .map(|(c, l)| format!("{l}. {c}"))
        .collect();
    let payload = json!({
        "question": state.question,
        "candidates": letters,
        "query_time": state.query_time.to_string(),
        "tools": config.tools.iter().map(|t| t.handler_id()).collect::<Vec<_>>(),
        "max_steps": MAX_SUBTASKS,
    });
    let req = ClientRequest::new(CallKind::Plan, payload).with_key(state.qid.clone());
    let outcome = match state.call(client, &req) {
        Ok(resp) => {
            let output = resp.json().unwrap_or(resp.output);
            let (steps, warnings) = lower_plan(&output, state.query_time, config, oracle);
            for message in warnings {
                state.trace.push(TraceEvent::PlanWarning { message });
            }
            if steps.is_empty() {
                Err(Error::validation("planner produced no usable steps"))
            } else {
                state.trace.push(TraceEvent::Planned {
                    steps: steps.len(),
                    tools: steps.iter().map(|s| s.tool).collect(),
                });
                state.plan = steps;
                Ok(())
            }
        }
        Err(e) => Err(Error::Client(e)),
    };
    if let Err(e) = &outcome {
        state.trace.push(TraceEvent::PlanningFailed { reason: e.to_string() });
    }
    state.timings.planning_s += config.clock.since(started);
    outcome
}

// --------------------------------------------------------------- execution

struct Retrieval {
    items: Vec<Value>,
    images: u64,
    detail: Option<String>,
    /// Whole-day transcript search produces the note directly.
    note: Option<AnalysisNote>,
}

/// Runs the sub-task at `state.current`: retrieval via the routed tool,
/// analysis, then appends the note. Tool failures become an error note.
pub fn execute_subtask(state: &mut AgentState, stores: &Stores, client: &dyn ModelClient, config: &AgentConfig) {
    let Some(task) = state.plan.get(state.current).cloned() else {
        return;
    };
    let started = config.clock.now();
    let retrieval = retrieve(state, &task, stores, client, config);
    *state.timings.retrieval_s.entry(task.tool).or_default() += config.clock.since(started);

    let started = config.clock.now();
    let (note, detail) = match retrieval {
        Ok(Retrieval { note: Some(note), detail, .. }) => (note, detail),
        Ok(r) => (analyze(state, &task, &r.items, r.images, stores, client), r.detail),
        Err(e) => (
            AnalysisNote {
                subtask_index: task.index,
                tool: task.tool,
                summary: format!("retrieval failed: {e}"),
                cited_timestamps: Vec::new(),
                cited_edges: Vec::new(),
                retrieved_count: 0,
                error: Some(e.to_string()),
            },
            None,
        ),
    };
    *state.timings.analysis_s.entry(task.tool).or_default() += config.clock.since(started);

    state.trace.push(TraceEvent::Executed {
        index: task.index,
        handler: route(&task).to_string(),
        retrieved: note.retrieved_count,
        cited_timestamps: note.cited_timestamps.len(),
        cited_edges: note.cited_edges.len(),
        detail,
        error: note.error.clone(),
    });
    state.working_memory.push(note);
    state.current += 1;
}

fn retrieve(
    state: &mut AgentState,
    task: &SubTask,
    stores: &Stores,
    client: &dyn ModelClient,
    config: &AgentConfig,
) -> Result<Retrieval> {
    match &task.args {
        ToolArgs::Graph(intent) => {
            let r = stores.graph.run_ladder(intent, config.ladder_max_rows)?;
            let items = r
                .rows
                .iter()
                .map(|e| {
                    json!({
                        "row_id": e.row_id,
                        "when": e.interval.start.to_string(),
                        "end": e.interval.end.to_string(),
                        "source": format!("{} ({})", e.source.id, e.source.etype),
                        "rel": e.rel.as_str(),
                        "target": format!("{} ({})", e.target.id, e.target.etype),
                        "evidence": e.evidence,
                    })
                })
                .collect();
            let stage = r.stage_used.map_or("none".to_string(), |s| format!("{s:?}"));
            Ok(Retrieval {
                items,
                images: 0,
                detail: Some(format!("stage {stage} after {} queries", r.queries_issued.len())),
                note: None,
            })
        }
        ToolArgs::Visual(args) => {
            let Some(index) = &stores.frames else {
                return Ok(Retrieval {
                    items: Vec::new(),
                    images: 0,
                    detail: Some("no frame index".into()),
                    note: None,
                });
            };
            let mut queries = args.queries.clone();
            if queries.is_empty() {
                queries = rewrite_visual(state, task, client)?;
            }
            let mut vectors = Vec::new();
            for q in &queries {
                let req = ClientRequest::new(CallKind::EmbedText, json!({"text": q, "dim": index.dim()})).with_key(q.clone());
                let resp = state.call(client, &req)?;
                let v: Vec<f32> = serde_json::from_value(resp.json().unwrap_or(Value::Null))
                    .map_err(|e| Error::validation(format!("embedding for {q:?} is not a vector: {e}")))?;
                vectors.push(v);
            }
            let hits = index.multi_query_search(&vectors, &args.windows, config.k_total)?;
            let items: Vec<Value> = hits
                .iter()
                .map(|h| {
                    json!({
                        "frame_id": h.frame.frame_id,
                        "when": h.frame.when.to_string(),
                        "location": h.frame.location,
                        "score": h.score,
                    })
                })
                .collect();
            Ok(Retrieval {
                images: items.len() as u64,
                items,
                detail: Some(format!("{} queries", queries.len())),
                note: None,
            })
        }
        ToolArgs::Audio(args) => match args.variant {
            TranscriptVariant::Bm25 => {
                let hits = stores.transcripts.bm25_search_with_context(
                    &args.task,
                    Some(args.range),
                    config.bm25_k,
                    config.bm25_context,
                )?;
                let items = hits
                    .iter()
                    .map(|h| {
                        json!({
                            "utt_id": h.utterance.utt_id,
                            "when": h.utterance.when.start.to_string(),
                            "speaker": h.utterance.speaker,
                            "text": h.utterance.text,
                            "score": h.score,
                            "context": h.context.iter().map(|u| u.render_line()).collect::<Vec<_>>(),
                        })
                    })
                    .collect();
                Ok(Retrieval {
                    items,
                    images: 0,
                    detail: Some("bm25".into()),
                    note: None,
                })
            }
            TranscriptVariant::Llm => {
                let memory = state.memory_text();
                let key = state.step_key(task.index);
                let per_day = stores.transcripts.llm_search_days(
                    &args.task,
                    &memory,
                    &args.days,
                    Some(state.query_time),
                    client,
                    Some(&key),
                )?;
                let mut summary = Vec::new();
                let mut cited: Vec<DayTime> = Vec::new();
                let mut retrieved = 0;
                for (day, note, usage) in &per_day {
                    state.token_ledger.record(CallKind::TranscriptLlmSearch, *usage);
                    summary.push(format!("D{day}: {}", note.summary.trim()));
                    for t in &note.cited_timestamps {
                        if !cited.contains(t) {
                            cited.push(*t);
                        }
                    }
                    retrieved += note.retrieved_count;
                }
                Ok(Retrieval {
                    items: Vec::new(),
                    images: 0,
                    detail: Some(format!("llm over {} day(s)", per_day.len())),
                    note: Some(AnalysisNote {
                        subtask_index: task.index,
                        tool: task.tool,
                        summary: summary.join("\n"),
                        cited_timestamps: cited,
                        cited_edges: Vec::new(),
                        retrieved_count: retrieved,
                        error: None,
                    }),
                })
            }
        },
    }
}

fn rewrite_visual(state: &mut AgentState, task: &SubTask, client: &dyn ModelClient) -> Result<Vec<String>> {
    let req = ClientRequest::new(
        CallKind::RewriteVisual,
        json!({"question": state.question, "task": task.description}),
    )
    .with_key(state.step_key(task.index));
    let resp = state.call(client, &req)?;
    let list = match resp.json() {
        Some(Value::Object(o)) => o.get("queries").cloned().unwrap_or(Value::Null),
        Some(v) => v,
        None => Value::Null,
    };
    let mut queries: Vec<String> = match list {
        Value::Array(a) => a.iter().filter_map(Value::as_str).map(String::from).collect(),
        Value::String(s) => vec![s],
        _ => resp.text().lines().map(String::from).collect(),
    };
    queries.retain(|q| !q.trim().is_empty());
    queries.truncate(MAX_QUERIES);
    if queries.is_empty() && !task.description.trim().is_empty() {
        queries.push(task.description.clone());
    }
    if queries.is_empty() {
        return Err(Error::validation("no visual queries"));
    }
    Ok(queries)
}

/// The single day a sub-task is scoped to, if any. Bare clock times in the
/// analysis of such a task refer to that day.
fn focus_day(task: &SubTask) -> Option<u32> {
    fn single(mut days: impl Iterator<Item = Option<u32>>) -> Option<u32> {
        let first = days.next()??;
        days.all(|d| d == Some(first)).then_some(first)
    }
    match &task.args {
        ToolArgs::Graph(intent) => intent.day,
        ToolArgs::Visual(args) => single(args.windows.iter().map(|w| w.day)),
        ToolArgs::Audio(args) => single(args.days.iter().map(|d| Some(*d))),
    }
}

fn analyze(
    state: &mut AgentState,
    task: &SubTask,
    items: &[Value],
    images: u64,
    stores: &Stores,
    client: &dyn ModelClient,
) -> AnalysisNote {
    let payload = json!({
        "question": state.question,
        "task": task.description,
        "tool": route(task),
        "memory": state.memory_text(),
        "retrieved": items,
    });
    let req = ClientRequest::new(CallKind::Analyze, payload)
        .with_key(state.step_key(task.index))
        .with_images(images);
    let mut note = AnalysisNote {
        subtask_index: task.index,
        tool: task.tool,
        summary: String::new(),
        cited_timestamps: Vec::new(),
        cited_edges: Vec::new(),
        retrieved_count: items.len(),
        error: None,
    };
    match state.call(client, &req) {
        Ok(resp) => {
            let (summary, ts) = parse_analysis_output(&resp.output, focus_day(task).unwrap_or(state.query_time.day));
            note.summary = summary;
            note.cited_timestamps = ts;
            let edges = resp
                .json()
                .and_then(|v| v.get("edges").and_then(Value::as_array).cloned())
                .unwrap_or_default();
            for id in edges.iter().filter_map(Value::as_i64) {
                if stores.graph.get(id).is_some() && !note.cited_edges.contains(&id) {
                    note.cited_edges.push(id);
                }
            }
        }
        Err(e) => {
            note.summary = format!("analysis failed: {e}");
            note.error = Some(e.to_string());
        }
    }
    note
}

// ------------------------------------------------------ grading, answering

/// Reads a grader reply: `complete` (any case, optional trailing period or
/// quotes) or `{"verdict": "complete"}` is complete; anything else is not.
pub fn parse_completion(output: &Value) -> Completion {
    let text = match output {
        Value::String(s) => match crate::client::parse_json_lenient(s) {
            Some(Value::Object(o)) => o.get("verdict").and_then(Value::as_str).unwrap_or("").to_string(),
            _ => s.clone(),
        },
        Value::Object(o) => o.get("verdict").and_then(Value::as_str).unwrap_or("").to_string(),
        _ => String::new(),
    };
    let t = text.trim().trim_matches(|c| c == '"' || c == '\'' || c == '.').trim();
    if t.eq_ignore_ascii_case("complete") {
        Completion::Complete
    } else {
        Completion::Incomplete
    }
}

pub fn grade_completion(state: &mut AgentState, client: &dyn ModelClient, config: &AgentConfig) -> Completion {
    let started = config.clock.now();
    let payload = json!({
        "question": state.question,
        "plan": state.plan.iter().map(|s| s.description.clone()).collect::<Vec<_>>(),
        "executed": state.current,
        "remaining": state.plan[state.current.min(state.plan.len())..].iter().map(|s| s.description.clone()).collect::<Vec<_>>(),
        "memory": state.memory_text(),
    });
    let req = ClientRequest::new(CallKind::Grade, payload).with_key(state.step_key(state.current));
    let (verdict, error) = match state.call(client, &req) {
        Ok(resp) => (parse_completion(&resp.output), None),
        Err(e) => (Completion::Incomplete, Some(e.to_string())),
    };
    state.trace.push(TraceEvent::Graded {
        after: state.current,
        verdict,
        error,
    });
    state.timings.grading_s += config.clock.since(started);
    verdict
}

static STANDALONE_UPPER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[^A-Za-z0-9_])([A-D])(?:$|[^A-Za-z0-9_])").expect("letter regex"));
static STANDALONE_LOWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[^A-Za-z0-9_])([a-d])(?:$|[^A-Za-z0-9_'])").expect("letter regex"));

/// Choice index from an answerer reply: `{"answer": ...}`, otherwise the
/// first standalone letter A–D. Capital letters are looked for first so
/// that prose articles ("a") do not shadow an explicit choice.
pub fn parse_choice(output: &Value) -> Option<usize> {
    let text = match output {
        Value::Object(o) => return o.get("answer").and_then(parse_choice),
        Value::Number(n) => return n.as_u64().filter(|n| *n < 4).map(|n| n as usize),
        Value::String(s) => match crate::client::parse_json_lenient(s) {
            Some(v @ Value::Object(_)) => return parse_choice(&v),
            _ => s.as_str(),
        },
        _ => return None,
    };
    let letter = STANDALONE_UPPER
        .captures(text)
        .or_else(|| STANDALONE_LOWER.captures(text))
        .and_then(|c| c.get(1))?;
    let ch = letter.as_str().chars().next()?.to_ascii_uppercase();
    LETTERS.iter().position(|l| *l == ch)
}

/// Final choice; falls back to candidate 0 when the reply has no letter or
/// the call fails. Returns `(choice, fallback)`.
pub fn answer(state: &mut AgentState, client: &dyn ModelClient, config: &AgentConfig) -> (usize, bool) {
    let started = config.clock.now();
    let payload = json!({
        "question": state.question,
        "candidates": state.candidates.iter().zip(LETTERS).map(|(c, l)| format!("{l}. {c}")).collect::<Vec<_>>(),
        "query_time": state.query_time.to_string(),
        "memory": state.memory_text(),
    });
    let req = ClientRequest::new(CallKind::Answer, payload).with_key(state.qid.clone());
    let (choice, error) = match state.call(client, &req) {
        Ok(resp) => (parse_choice(&resp.output), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let fallback = choice.is_none();
    let choice = choice.unwrap_or(0);
    state.answer = Some(choice);
    state.trace.push(TraceEvent::Answered { choice, fallback, error });
    state.timings.answering_s += config.clock.since(started);
    (choice, fallback)
}

/// Answers one question end to end. Never fails: every phase degrades into
/// the trace.
pub fn run(item: &MCQItem, stores: &Stores, client: &dyn ModelClient, config: &AgentConfig) -> AnswerTrace {
    let mut state = AgentState::new(&item.qid, &item.question, &item.candidates, item.query_time, config.image_token_rate);
    let oracle = config.oracle.then(|| oracle_context(item));
    let mut early_exit = false;
    if plan(&mut state, client, config, oracle.as_ref()).is_ok() {
        while state.current < state.plan.len() {
            execute_subtask(&mut state, stores, client, config);
            if state.current < state.plan.len() && grade_completion(&mut state, client, config) == Completion::Complete {
                let skipped = state.plan.len() - state.current;
                state.trace.push(TraceEvent::EarlyExit {
                    after: state.current,
                    skipped,
                });
                early_exit = true;
                break;
            }
        }
    }
    let (choice, fallback) = answer(&mut state, client, config);
    AnswerTrace {
        qid: item.qid.clone(),
        choice,
        letter: LETTERS[choice].to_string(),
        fallback,
        early_exit,
        state,
    }
}
