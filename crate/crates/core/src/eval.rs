//! Benchmark loading, accuracy, recall@W, oracle windows and run reports.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{run, AgentConfig, AnswerTrace, LedgerTotals};
use crate::client::{CallKind, ModelClient};
use crate::error::{Error, Result};
use crate::model::Tool;
use crate::stores::Stores;
use crate::time::{DayTime, DEFAULT_DAY_LENGTH_S};
use crate::visual::FrameFilter;

/// Recall windows in seconds used by default.
pub const DEFAULT_RECALL_WINDOWS: [u64; 6] = [10, 30, 60, 120, 600, 3600];
/// Half-width of the oracle frame window: 50 frames at 1 FPS.
pub const ORACLE_HALF_WINDOW_S: i64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    EntityLog,
    EventRecall,
    HabitInsight,
    RelationMap,
    TaskMaster,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQItem {
    pub qid: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold: usize,
    #[serde(default)]
    pub category: Option<Category>,
    pub query_time: DayTime,
    #[serde(default)]
    pub target_times: Vec<DayTime>,
}

impl MCQItem {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(format!("item {}: {m}", self.qid)));
        if self.qid.trim().is_empty() {
            return Err(Error::validation("item with empty qid"));
        }
        if self.candidates.len() != 4 {
            return bad(format!("expected 4 candidates, got {}", self.candidates.len()));
        }
        if self.gold > 3 {
            return bad(format!("gold index {} out of range", self.gold));
        }
        if let Some(t) = self.target_times.iter().find(|t| **t > self.query_time) {
            return bad(format!("target time {t} is after query time {}", self.query_time));
        }
        Ok(())
    }
}

/// Parses a JSON array of items, validating each and rejecting duplicate
/// qids. Errors name the offending qid (or array index).
pub fn parse_benchmark(text: &str) -> Result<Vec<MCQItem>> {
    let raw: Vec<Value> =
        serde_json::from_str(text).map_err(|e| Error::validation(format!("benchmark is not a JSON array: {e}")))?;
    let mut items = Vec::with_capacity(raw.len());
    let mut seen = HashSet::new();
    for (i, v) in raw.into_iter().enumerate() {
        let label = v
            .get("qid")
            .and_then(Value::as_str)
            .map_or_else(|| format!("#{i}"), String::from);
        let item: MCQItem =
            serde_json::from_value(v).map_err(|e| Error::validation(format!("item {label}: {e}")))?;
        item.validate()?;
        if !seen.insert(item.qid.clone()) {
            return Err(Error::DuplicateId(item.qid));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_benchmark(path: impl AsRef<Path>) -> Result<Vec<MCQItem>> {
    parse_benchmark(&std::fs::read_to_string(path)?)
}

/// Percentage rounded to one decimal place.
pub fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1000.0 * correct as f64 / total as f64).round() / 10.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    pub percent: f64,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
        self.percent = percent(self.correct, self.total);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: Tally,
    pub per_category: BTreeMap<Category, Tally>,
    /// Items with no trace, counted incorrect.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

pub fn accuracy(traces: &[AnswerTrace], items: &[MCQItem]) -> AccuracyReport {
    let by_qid: HashMap<&str, &AnswerTrace> = traces.iter().map(|t| (t.qid.as_str(), t)).collect();
    let mut r = AccuracyReport::default();
    for item in items {
        let ok = match by_qid.get(item.qid.as_str()) {
            Some(t) => t.choice == item.gold,
            None => {
                warn!("no trace for {}; counted incorrect", item.qid);
                r.missing.push(item.qid.clone());
                false
            }
        };
        r.overall.add(ok);
        if let Some(c) = item.category {
            r.per_category.entry(c).or_default().add(ok);
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallConfig {
    pub window_seconds: u64,
    pub day_length_s: u64,
}

impl RecallConfig {
    pub fn new(window_seconds: u64) -> Result<Self> {
        if window_seconds == 0 {
            return Err(Error::validation("recall window must be positive"));
        }
        Ok(Self {
            window_seconds,
            day_length_s: DEFAULT_DAY_LENGTH_S,
        })
    }
}

/// Fraction of `targets` with a selected timestamp on the same day within
/// `W/2` seconds. `None` when there are no targets.
pub fn recall_at_w(selected: &[DayTime], targets: &[DayTime], cfg: &RecallConfig) -> Option<f64> {
    if targets.is_empty() {
        return None;
    }
    let hits = targets
        .iter()
        .filter(|t| {
            selected.iter().any(|s| {
                s.day == t.day && 2 * (s.second_of_day() as i64 - t.second_of_day() as i64).unsigned_abs() <= cfg.window_seconds
            })
        })
        .count();
    Some(hits as f64 / targets.len() as f64)
}

/// Mean per-item recall over items with targets, and how many were scored.
pub fn corpus_recall<'a>(
    items: impl IntoIterator<Item = (&'a [DayTime], &'a [DayTime])>,
    cfg: &RecallConfig,
) -> (f64, usize) {
    let scores: Vec<f64> = items
        .into_iter()
        .filter_map(|(sel, tgt)| recall_at_w(sel, tgt, cfg))
        .collect();
    if scores.is_empty() {
        return (0.0, 0);
    }
    (scores.iter().sum::<f64>() / scores.len() as f64, scores.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleContext {
    /// One window per distinct target, clamped to its day.
    pub frame_windows: Vec<FrameFilter>,
    /// Every day holding a target, ascending.
    pub transcript_days: Vec<u32>,
}

pub fn oracle_context(item: &MCQItem) -> OracleContext {
    let mut frame_windows: Vec<FrameFilter> = Vec::new();
    for t in &item.target_times {
        let lo = t.offset_clamped(-ORACLE_HALF_WINDOW_S);
        let hi = t.offset_clamped(ORACLE_HALF_WINDOW_S);
        let w = FrameFilter {
            day: Some(t.day),
            time_range: Some((lo.time_hhmmss, hi.time_hhmmss)),
            location: None,
            before: Some(item.query_time),
        };
        if !frame_windows.contains(&w) {
            frame_windows.push(w);
        }
    }
    let days: BTreeSet<u32> = item.target_times.iter().map(|t| t.day).collect();
    OracleContext {
        frame_windows,
        transcript_days: days.into_iter().collect(),
    }
}

/// Runs every item with at most `jobs` in flight; traces come back in item
/// order.
pub fn run_benchmark(
    items: &[MCQItem],
    stores: &Stores,
    client: &dyn ModelClient,
    config: &AgentConfig,
    jobs: usize,
) -> Result<Vec<AnswerTrace>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(|item| run(item, stores, client, config)).collect()))
}

/// Every timestamp cited in a trace's working memory.
pub fn selected_timestamps(trace: &AnswerTrace) -> Vec<DayTime> {
    trace
        .state
        .working_memory
        .iter()
        .flat_map(|n| n.cited_timestamps.iter().copied())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolStats {
    pub subtasks: usize,
    /// Items handed to the analyzer (retrieved rows, frames, utterances).
    pub input_ts: usize,
    /// Timestamps the analyzer cited.
    pub selected_ts: usize,
    pub cited_edges: usize,
    pub errors: usize,
    pub mean_retrieval_s: f64,
    pub mean_analysis_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub window_s: u64,
    pub all_tools: f64,
    pub per_tool: BTreeMap<Tool, f64>,
    pub scored_items: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<AccuracyReport>,
    pub recall: Vec<RecallRow>,
    pub tools: BTreeMap<Tool, ToolStats>,
    /// Tools with at least one cited timestamp or edge.
    pub tools_contributing: Vec<Tool>,
    pub mean_planning_s: f64,
    pub mean_grading_s: f64,
    pub mean_answering_s: f64,
    pub mean_total_s: f64,
    pub tokens: LedgerTotals,
    pub mean_tokens: f64,
    pub tokens_by_kind: BTreeMap<CallKind, LedgerTotals>,
    pub mean_executed_subtasks: f64,
    pub early_exits: usize,
    pub planning_failures: usize,
    pub answer_fallbacks: usize,
}

/// Aggregates traces. With `items`, accuracy and recall are included.
pub fn report(traces: &[AnswerTrace], items: Option<&[MCQItem]>, recall_windows: &[u64]) -> Report {
    let n = traces.len().max(1) as f64;
    let mut r = Report {
        items: traces.len(),
        ..Default::default()
    };
    let mut contributing = BTreeSet::new();
    let mut retrieval_s: BTreeMap<Tool, f64> = BTreeMap::new();
    let mut analysis_s: BTreeMap<Tool, f64> = BTreeMap::new();
    for t in traces {
        let s = &t.state;
        for note in &s.working_memory {
            let ts = r.tools.entry(note.tool).or_default();
            ts.subtasks += 1;
            ts.input_ts += note.retrieved_count;
            ts.selected_ts += note.cited_timestamps.len();
            ts.cited_edges += note.cited_edges.len();
            ts.errors += note.error.is_some() as usize;
            if !note.cited_timestamps.is_empty() || !note.cited_edges.is_empty() {
                contributing.insert(note.tool);
            }
        }
        for (tool, secs) in &s.timings.retrieval_s {
            *retrieval_s.entry(*tool).or_default() += secs;
        }
        for (tool, secs) in &s.timings.analysis_s {
            *analysis_s.entry(*tool).or_default() += secs;
        }
        r.mean_planning_s += s.timings.planning_s / n;
        r.mean_grading_s += s.timings.grading_s / n;
        r.mean_answering_s += s.timings.answering_s / n;
        r.tokens.add(&s.token_ledger.totals);
        for (kind, totals) in s.token_ledger.by_kind() {
            r.tokens_by_kind.entry(kind).or_default().add(&totals);
        }
        r.mean_executed_subtasks += s.current as f64 / n;
        r.early_exits += t.early_exit as usize;
        r.answer_fallbacks += t.fallback as usize;
        r.planning_failures += s
            .trace
            .iter()
            .any(|e| matches!(e, crate::agent::TraceEvent::PlanningFailed { .. })) as usize;
    }
    for (tool, stats) in r.tools.iter_mut() {
        stats.mean_retrieval_s = retrieval_s.get(tool).copied().unwrap_or(0.0) / n;
        stats.mean_analysis_s = analysis_s.get(tool).copied().unwrap_or(0.0) / n;
    }
    r.mean_total_s = r.mean_planning_s
        + r.mean_grading_s
        + r.mean_answering_s
        + r.tools.values().map(|s| s.mean_retrieval_s + s.mean_analysis_s).sum::<f64>();
    r.mean_tokens = r.tokens.total_tokens as f64 / n;
    r.tools_contributing = contributing.into_iter().collect();

    if let Some(items) = items {
        r.accuracy = Some(accuracy(traces, items));
        let by_qid: HashMap<&str, &AnswerTrace> = traces.iter().map(|t| (t.qid.as_str(), t)).collect();
        type Selection<'a> = (&'a MCQItem, Vec<DayTime>, BTreeMap<Tool, Vec<DayTime>>);
        let selections: Vec<Selection> = items
            .iter()
            .map(|item| {
                let mut per_tool: BTreeMap<Tool, Vec<DayTime>> = BTreeMap::new();
                let all = match by_qid.get(item.qid.as_str()) {
                    Some(t) => {
                        for note in &t.state.working_memory {
                            per_tool.entry(note.tool).or_default().extend(&note.cited_timestamps);
                        }
                        selected_timestamps(t)
                    }
                    None => Vec::new(),
                };
                (item, all, per_tool)
            })
            .collect();
        for &w in recall_windows {
            let Ok(cfg) = RecallConfig::new(w) else { continue };
            let (all_tools, scored) = corpus_recall(
                selections.iter().map(|(i, sel, _)| (sel.as_slice(), i.target_times.as_slice())),
                &cfg,
            );
            let empty = Vec::new();
            let per_tool = r
                .tools
                .keys()
                .map(|tool| {
                    let (v, _) = corpus_recall(
                        selections
                            .iter()
                            .map(|(i, _, pt)| (pt.get(tool).unwrap_or(&empty).as_slice(), i.target_times.as_slice())),
                        &cfg,
                    );
                    (*tool, v)
                })
                .collect();
            r.recall.push(RecallRow {
                window_s: w,
                all_tools,
                per_tool,
                scored_items: scored,
            });
        }
    }
    r
}

impl Report {
    /// Plain-text tables: accuracy, recall@W, per-tool counts, runtime and
    /// tokens.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(acc) = &self.accuracy {
            let _ = writeln!(out, "MCQ accuracy (%)");
            let mut header = format!("{:<14}", "Overall");
            let mut row = format!("{:<14}", format!("{:.1}", acc.overall.percent));
            for (cat, tally) in &acc.per_category {
                header.push_str(&format!("{:<14}", cat.to_string()));
                row.push_str(&format!("{:<14}", format!("{:.1}", tally.percent)));
            }
            let _ = writeln!(out, "{}\n{}", header.trim_end(), row.trim_end());
            let _ = writeln!(out, "correct {}/{}", acc.overall.correct, acc.overall.total);
            if !acc.missing.is_empty() {
                let _ = writeln!(out, "missing traces: {}", acc.missing.join(", "));
            }
            let _ = writeln!(out);
        }
        if !self.recall.is_empty() {
            let _ = writeln!(out, "recall@W");
            let mut header = format!("{:<12}", "tool");
            for row in &self.recall {
                header.push_str(&format!("{:>9}", format!("{}s", row.window_s)));
            }
            let _ = writeln!(out, "{}", header);
            let mut all = format!("{:<12}", "all");
            for row in &self.recall {
                all.push_str(&format!("{:>9.3}", row.all_tools));
            }
            let _ = writeln!(out, "{}", all);
            for tool in self.tools.keys() {
                let mut line = format!("{:<12}", tool.handler_id());
                for row in &self.recall {
                    line.push_str(&format!("{:>9.3}", row.per_tool.get(tool).copied().unwrap_or(0.0)));
                }
                let _ = writeln!(out, "{}", line);
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(
            out,
            "{:<8}{:>10}{:>12}{:>15}{:>8}{:>12}{:>13}{:>12}",
            "tool", "subtasks", "input #ts", "selected #ts", "edges", "retrieve s", "analyze s", "cites"
        );
        for (tool, s) in &self.tools {
            let _ = writeln!(
                out,
                "{:<8}{:>10}{:>12}{:>15}{:>8}{:>12.3}{:>13.3}{:>12}",
                tool.handler_id(),
                s.subtasks,
                s.input_ts,
                s.selected_ts,
                s.cited_edges,
                s.mean_retrieval_s,
                s.mean_analysis_s,
                if self.tools_contributing.contains(tool) { "yes" } else { "no" }
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "items {}  mean runtime {:.3}s (plan {:.3}, grade {:.3}, answer {:.3})",
            self.items, self.mean_total_s, self.mean_planning_s, self.mean_grading_s, self.mean_answering_s
        );
        let _ = writeln!(
            out,
            "tokens {} total, {:.1} per item (prompt {}, completion {}, images {} x rate = {})",
            self.tokens.total_tokens,
            self.mean_tokens,
            self.tokens.prompt_tokens,
            self.tokens.completion_tokens,
            self.tokens.image_count,
            self.tokens.image_tokens
        );
        let _ = writeln!(
            out,
            "mean sub-tasks {:.2}  early exits {}  planning failures {}  answer fallbacks {}",
            self.mean_executed_subtasks, self.early_exits, self.planning_failures, self.answer_fallbacks
        );
        out
    }
}
