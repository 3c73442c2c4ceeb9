use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::RelationEdge;
use crate::error::{Error, Result};
use crate::model::{normalize_id, EntityType, RelationType};
use crate::time::{decode_time, DayTime};

/// Structured search request against the entity graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphQueryIntent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<u32>,
    /// `(start_t >=, end_t <=)` in HHMMSS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_range: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_type: Option<EntityType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_type: Option<EntityType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel: Option<RelationType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_substring: Option<String>,
    /// Rows later than this day are never returned.
    pub query_time: DayTime,
}

impl GraphQueryIntent {
    pub fn new(query_time: DayTime) -> Self {
        Self {
            day: None,
            time_range: None,
            source_id: None,
            source_type: None,
            target_id: None,
            target_type: None,
            rel: None,
            evidence_substring: None,
            query_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_id.is_none() && self.source_id.is_none() && self.rel.is_none() && self.evidence_substring.is_none() {
            return Err(Error::validation(
                "graph query needs at least one of target_id, source_id, rel, evidence",
            ));
        }
        for (name, id) in [("source_id", &self.source_id), ("target_id", &self.target_id)] {
            if matches!(id, Some(s) if s.trim().is_empty()) {
                return Err(Error::validation(format!("{name} is empty")));
            }
        }
        if matches!(&self.evidence_substring, Some(s) if s.trim().is_empty()) {
            return Err(Error::validation("evidence substring is empty"));
        }
        if let Some((lo, hi)) = self.time_range {
            decode_time(lo)?;
            decode_time(hi)?;
            if lo > hi {
                return Err(Error::validation(format!("time range {lo}..{hi} is inverted")));
            }
        }
        Ok(())
    }

    /// Lowers planner/model arguments into an intent.
    ///
    /// Accepts either structured fields (`day`, `time_range: [lo, hi]`,
    /// `source_id`, `source_type`, `target_id`, `target_type`, `rel` /
    /// `rel_type`, `evidence`) with lenient type spellings, or `sql` /
    /// `sql_queries` holding `SELECT * FROM entity_graph_table WHERE ...`
    /// text, of which the first parseable statement is used.
    pub fn from_args(args: &Value, query_time: DayTime) -> Result<Self> {
        if let Some(sql) = args.get("sql").and_then(Value::as_str) {
            return super::sql::parse_where_clause(sql, query_time);
        }
        if let Some(list) = args.get("sql_queries").and_then(Value::as_array) {
            let mut last_err = Error::validation("sql_queries is empty");
            for q in list.iter().filter_map(Value::as_str) {
                match super::sql::parse_where_clause(q, query_time) {
                    Ok(intent) => return Ok(intent),
                    Err(e) => last_err = e,
                }
            }
            return Err(last_err);
        }

        let text = |k: &str| {
            args.get(k)
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
        };
        let etype = |k: &str| text(k).map(|s| EntityType::parse_lenient(&s)).transpose();
        let mut intent = GraphQueryIntent::new(query_time);
        intent.day = args.get("day").and_then(Value::as_u64).map(|d| d as u32);
        intent.time_range = match args.get("time_range") {
            Some(Value::Array(a)) if a.len() == 2 => {
                let lo = a[0].as_u64().ok_or_else(|| Error::validation("time_range bound is not an integer"))?;
                let hi = a[1].as_u64().ok_or_else(|| Error::validation("time_range bound is not an integer"))?;
                Some((lo as u32, hi as u32))
            }
            None | Some(Value::Null) => None,
            Some(other) => return Err(Error::validation(format!("bad time_range {other}"))),
        };
        intent.source_id = text("source_id");
        intent.source_type = etype("source_type")?;
        intent.target_id = text("target_id");
        intent.target_type = etype("target_type")?;
        intent.rel = text("rel")
            .or_else(|| text("rel_type"))
            .map(|s| RelationType::parse_lenient(&s))
            .transpose()?;
        intent.evidence_substring = text("evidence").or_else(|| text("evidence_substring"));
        intent.validate()?;
        Ok(intent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdMatch {
    /// Equality after trimming and lowercasing.
    Exact(String),
    /// Lowercased containment.
    Contains(String),
}

impl IdMatch {
    fn matches(&self, id: &str) -> bool {
        match self {
            IdMatch::Exact(want) => normalize_id(id) == *want,
            IdMatch::Contains(needle) => id.to_lowercase().contains(needle.as_str()),
        }
    }

    fn render(&self, column: &str, out: &mut String) {
        match self {
            IdMatch::Exact(v) => write!(out, " AND lower(trim({column})) = {}", sql_quote(v)),
            IdMatch::Contains(v) => write!(out, " AND instr(lower({column}), {}) > 0", sql_quote(v)),
        }
        .ok();
    }
}

/// A fully resolved filter for one ladder stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StagePredicate {
    pub day_cap: u32,
    pub day: Option<u32>,
    pub time_range: Option<(u32, u32)>,
    pub source: Option<IdMatch>,
    pub source_type: Option<EntityType>,
    pub target: Option<IdMatch>,
    pub target_type: Option<EntityType>,
    pub rel: Option<RelationType>,
    /// Lowercased.
    pub evidence: Option<String>,
}

impl StagePredicate {
    /// Every set field of the intent, ids matched exactly.
    pub fn strict(intent: &GraphQueryIntent) -> Self {
        Self {
            day_cap: intent.query_time.day,
            day: intent.day,
            time_range: intent.time_range,
            source: intent.source_id.as_deref().map(|s| IdMatch::Exact(normalize_id(s))),
            source_type: intent.source_type,
            target: intent.target_id.as_deref().map(|s| IdMatch::Exact(normalize_id(s))),
            target_type: intent.target_type,
            rel: intent.rel,
            evidence: intent.evidence_substring.as_deref().map(str::to_lowercase),
        }
    }

    pub fn matches(&self, e: &RelationEdge) -> bool {
        let day = e.day();
        if day > self.day_cap {
            return false;
        }
        if self.day.is_some_and(|d| d != day) {
            return false;
        }
        if let Some((lo, hi)) = self.time_range {
            if e.start_t() < lo || e.end_t() > hi {
                return false;
            }
        }
        if self.source.as_ref().is_some_and(|m| !m.matches(&e.source.id)) {
            return false;
        }
        if self.source_type.is_some_and(|t| t != e.source.etype) {
            return false;
        }
        if self.target.as_ref().is_some_and(|m| !m.matches(&e.target.id)) {
            return false;
        }
        if self.target_type.is_some_and(|t| t != e.target.etype) {
            return false;
        }
        if self.rel.is_some_and(|r| r != e.rel) {
            return false;
        }
        if let Some(needle) = &self.evidence {
            if !e.evidence.to_lowercase().contains(needle.as_str()) {
                return false;
            }
        }
        true
    }

    /// Canonical SQL text for this predicate. Executing it against the
    /// backing table returns the same rows as [`StagePredicate::matches`]
    /// for ASCII data.
    pub fn render(&self) -> String {
        let mut out = format!("SELECT * FROM entity_graph_table WHERE day <= {}", self.day_cap);
        if let Some(d) = self.day {
            write!(out, " AND day = {d}").ok();
        }
        if let Some((lo, hi)) = self.time_range {
            write!(out, " AND start_t >= {lo} AND end_t <= {hi}").ok();
        }
        if let Some(m) = &self.source {
            m.render("source_id", &mut out);
        }
        if let Some(t) = self.source_type {
            write!(out, " AND source_type = {}", sql_quote(t.as_str())).ok();
        }
        if let Some(m) = &self.target {
            m.render("target_id", &mut out);
        }
        if let Some(t) = self.target_type {
            write!(out, " AND target_type = {}", sql_quote(t.as_str())).ok();
        }
        if let Some(r) = self.rel {
            write!(out, " AND rel_type = {}", sql_quote(r.as_str())).ok();
        }
        if let Some(ev) = &self.evidence {
            write!(out, " AND instr(lower(transcript), {}) > 0", sql_quote(ev)).ok();
        }
        out.push_str(" ORDER BY day, start_t, id");
        out
    }
}

fn sql_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}
