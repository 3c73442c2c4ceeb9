//! Entity-graph storage.
//!
//! Edges persist in a SQLite table `entity_graph_table` whose columns match
//! the relational schema the search prompts are written against. Reads are
//! served from an immutable in-memory snapshot that is swapped atomically
//! after each committed insert batch, so readers never see half a batch.

mod intent;
mod ladder;
mod sql;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rusqlite::{params, Connection};
use serde::{Deserialize, Serialize};

pub use intent::{GraphQueryIntent, IdMatch, StagePredicate};
pub use ladder::{run_ladder, LadderResult, LadderStage, DEFAULT_MAX_ROWS};
pub use sql::parse_where_clause;

use crate::error::{Error, Result};
use crate::model::{EntityRef, EntityType, RelationType};
use crate::time::TimeInterval;
#[cfg(test)]
use crate::time::DayTime;

pub const TABLE_NAME: &str = "entity_graph_table";

const CREATE_TABLE: &str = "CREATE TABLE IF NOT EXISTS entity_graph_table (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    day INTEGER,
    start_t INTEGER,
    end_t INTEGER,
    transcript TEXT,
    source_id TEXT,
    source_type TEXT,
    target_id TEXT,
    target_type TEXT,
    rel_type TEXT
)";

/// One stored relationship: `source -[rel]-> target` during `interval`,
/// supported by `evidence`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "EdgeRow", into = "EdgeRow")]
pub struct RelationEdge {
    /// Surrogate key; 0 until the edge has been stored.
    pub row_id: i64,
    pub source: EntityRef,
    pub target: EntityRef,
    pub rel: RelationType,
    pub interval: TimeInterval,
    pub evidence: String,
}

impl RelationEdge {
    pub fn new(
        source: EntityRef,
        target: EntityRef,
        rel: RelationType,
        interval: TimeInterval,
        evidence: impl Into<String>,
    ) -> Self {
        Self {
            row_id: 0,
            source,
            target,
            rel,
            interval,
            evidence: evidence.into(),
        }
    }

    pub fn day(&self) -> u32 {
        self.interval.day()
    }

    pub fn start_t(&self) -> u32 {
        self.interval.start.time_hhmmss
    }

    pub fn end_t(&self) -> u32 {
        self.interval.end.time_hhmmss
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.id.trim().is_empty() || self.target.id.trim().is_empty() {
            return Err(Error::validation("edge endpoint id is empty"));
        }
        self.interval.validate()
    }

    fn dedup_key(&self) -> EdgeKey {
        let mut k = self.clone();
        k.row_id = 0;
        k
    }

    fn sort_key(&self) -> (u32, u32, i64) {
        (self.day(), self.start_t(), self.row_id)
    }
}

type EdgeKey = RelationEdge;

/// Flat row form, column-for-column with `entity_graph_table`. Used for
/// JSONL import/export and anywhere untyped rows arrive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    #[serde(default)]
    pub id: i64,
    pub day: u32,
    pub start_t: u32,
    pub end_t: u32,
    #[serde(default)]
    pub transcript: String,
    pub source_id: String,
    pub source_type: String,
    pub target_id: String,
    pub target_type: String,
    pub rel_type: String,
}

impl TryFrom<EdgeRow> for RelationEdge {
    type Error = Error;

    fn try_from(r: EdgeRow) -> Result<Self> {
        let edge = RelationEdge {
            row_id: r.id,
            source: EntityRef::new(r.source_id, r.source_type.parse()?)?,
            target: EntityRef::new(r.target_id, r.target_type.parse()?)?,
            rel: r.rel_type.parse()?,
            interval: TimeInterval::on_day(r.day, r.start_t, r.end_t)?,
            evidence: r.transcript,
        };
        Ok(edge)
    }
}

impl From<RelationEdge> for EdgeRow {
    fn from(e: RelationEdge) -> Self {
        EdgeRow {
            id: e.row_id,
            day: e.day(),
            start_t: e.start_t(),
            end_t: e.end_t(),
            transcript: e.evidence,
            source_id: e.source.id,
            source_type: e.source.etype.as_str().to_string(),
            target_id: e.target.id,
            target_type: e.target.etype.as_str().to_string(),
            rel_type: e.rel.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertReport {
    pub inserted: usize,
    pub duplicates: usize,
    /// `(index in the input batch, reason)`.
    pub rejected: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub total_edges: usize,
    pub edges_per_day: BTreeMap<u32, usize>,
    pub edges_per_rel: BTreeMap<RelationType, usize>,
    pub source_type_counts: BTreeMap<EntityType, usize>,
    pub target_type_counts: BTreeMap<EntityType, usize>,
}

impl GraphStats {
    pub fn from_edges<'a>(edges: impl IntoIterator<Item = &'a RelationEdge>) -> Self {
        let mut s = GraphStats::default();
        for e in edges {
            s.total_edges += 1;
            *s.edges_per_day.entry(e.day()).or_default() += 1;
            *s.edges_per_rel.entry(e.rel).or_default() += 1;
            *s.source_type_counts.entry(e.source.etype).or_default() += 1;
            *s.target_type_counts.entry(e.target.etype).or_default() += 1;
        }
        s
    }
}

#[derive(Debug, Default)]
struct Snapshot {
    rows: Vec<RelationEdge>,
    keys: HashSet<EdgeKey>,
}

pub struct GraphStore {
    writer: Mutex<Connection>,
    snapshot: RwLock<Arc<Snapshot>>,
}

impl GraphStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_connection(Connection::open(path)?)
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::from_connection(Connection::open_in_memory()?)
    }

    fn from_connection(conn: Connection) -> Result<Self> {
        conn.execute_batch(CREATE_TABLE)?;
        let rows = load_rows(&conn)?;
        let keys = rows.iter().map(RelationEdge::dedup_key).collect();
        Ok(Self {
            writer: Mutex::new(conn),
            snapshot: RwLock::new(Arc::new(Snapshot { rows, keys })),
        })
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot
            .read()
            .map(|g| Arc::clone(&g))
            .unwrap_or_else(|poisoned| Arc::clone(&poisoned.into_inner()))
    }

    /// All stored edges in `(day, start_t, row_id)` order.
    pub fn edges(&self) -> Vec<RelationEdge> {
        self.snapshot().rows.clone()
    }

    pub fn len(&self) -> usize {
        self.snapshot().rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row_id: i64) -> Option<RelationEdge> {
        self.snapshot().rows.iter().find(|e| e.row_id == row_id).cloned()
    }

    /// Inserts valid edges in one transaction. Invalid edges are reported and
    /// skipped; exact duplicates (every field but `row_id`) are skipped.
    pub fn insert_edges(&self, edges: &[RelationEdge]) -> Result<InsertReport> {
        let mut report = InsertReport::default();
        let mut conn = self
            .writer
            .lock()
            .map_err(|_| Error::validation("graph writer lock poisoned"))?;
        let current = self.snapshot();
        let mut keys = current.keys.clone();
        let mut fresh = Vec::new();

        let tx = conn.transaction()?;
        {
            let mut stmt = tx.prepare(
                "INSERT INTO entity_graph_table
                 (day, start_t, end_t, transcript, source_id, source_type, target_id, target_type, rel_type)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            )?;
            for (i, edge) in edges.iter().enumerate() {
                if let Err(e) = edge.validate() {
                    report.rejected.push((i, e.to_string()));
                    continue;
                }
                if !keys.insert(edge.dedup_key()) {
                    report.duplicates += 1;
                    continue;
                }
                stmt.execute(params![
                    edge.day(),
                    edge.start_t(),
                    edge.end_t(),
                    edge.evidence,
                    edge.source.id,
                    edge.source.etype.as_str(),
                    edge.target.id,
                    edge.target.etype.as_str(),
                    edge.rel.as_str(),
                ])?;
                let mut stored = edge.clone();
                stored.row_id = tx.last_insert_rowid();
                fresh.push(stored);
            }
        }
        tx.commit()?;

        report.inserted = fresh.len();
        if !fresh.is_empty() {
            let mut rows = current.rows.clone();
            rows.extend(fresh);
            rows.sort_by_key(RelationEdge::sort_key);
            let next = Arc::new(Snapshot { rows, keys });
            match self.snapshot.write() {
                Ok(mut g) => *g = next,
                Err(poisoned) => *poisoned.into_inner() = next,
            }
        }
        Ok(report)
    }

    /// Validates untyped rows (closed vocabularies, intervals) and inserts
    /// the valid ones.
    pub fn insert_rows(&self, rows: &[EdgeRow]) -> Result<InsertReport> {
        let mut rejected = Vec::new();
        let mut valid = Vec::new();
        let mut origin = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            match RelationEdge::try_from(row.clone()) {
                Ok(e) => {
                    valid.push(e);
                    origin.push(i);
                }
                Err(e) => rejected.push((i, e.to_string())),
            }
        }
        let mut report = self.insert_edges(&valid)?;
        for (i, _) in report.rejected.iter_mut() {
            *i = origin[*i];
        }
        report.rejected.extend(rejected);
        report.rejected.sort();
        Ok(report)
    }

    /// Rows matching every set field of `intent` exactly (ids compared
    /// case-insensitively), capped at the query day.
    pub fn query(&self, intent: &GraphQueryIntent) -> Vec<RelationEdge> {
        self.select(&StagePredicate::strict(intent))
    }

    pub fn select(&self, predicate: &StagePredicate) -> Vec<RelationEdge> {
        self.snapshot()
            .rows
            .iter()
            .filter(|e| predicate.matches(e))
            .cloned()
            .collect()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats::from_edges(&self.snapshot().rows)
    }

    /// Runs the strict-to-relaxed ladder; see [`run_ladder`].
    pub fn run_ladder(&self, intent: &GraphQueryIntent, max_rows: usize) -> Result<LadderResult> {
        ladder::run_ladder(self, intent, max_rows)
    }

    /// Executes raw SQL text against the backing table, for cross-checking
    /// rendered predicates. Returned rows are converted to edges.
    pub fn execute_sql(&self, sql: &str) -> Result<Vec<RelationEdge>> {
        let conn = self
            .writer
            .lock()
            .map_err(|_| Error::validation("graph writer lock poisoned"))?;
        let mut stmt = conn.prepare(sql)?;
        let rows = stmt.query_map([], row_from_sql)?;
        rows.map(|r| RelationEdge::try_from(r?)).collect()
    }

    pub fn export_jsonl(&self, mut out: impl Write) -> Result<usize> {
        let snap = self.snapshot();
        for e in &snap.rows {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(snap.rows.len())
    }

    /// Imports edges from JSONL. Ids in the file are ignored; fresh row ids
    /// are assigned and exact duplicates skipped.
    pub fn import_jsonl(&self, input: impl std::io::Read, source_name: &str) -> Result<InsertReport> {
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: EdgeRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: source_name.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            rows.push(row);
        }
        self.insert_rows(&rows)
    }
}

fn row_from_sql(r: &rusqlite::Row<'_>) -> rusqlite::Result<EdgeRow> {
    Ok(EdgeRow {
        id: r.get("id")?,
        day: r.get("day")?,
        start_t: r.get("start_t")?,
        end_t: r.get("end_t")?,
        transcript: r.get::<_, Option<String>>("transcript")?.unwrap_or_default(),
        source_id: r.get("source_id")?,
        source_type: r.get("source_type")?,
        target_id: r.get("target_id")?,
        target_type: r.get("target_type")?,
        rel_type: r.get("rel_type")?,
    })
}

fn load_rows(conn: &Connection) -> Result<Vec<RelationEdge>> {
    let mut stmt = conn.prepare("SELECT * FROM entity_graph_table ORDER BY day, start_t, id")?;
    let rows = stmt.query_map([], row_from_sql)?;
    let mut out = Vec::new();
    for row in rows {
        let row = row?;
        let id = row.id;
        out.push(
            RelationEdge::try_from(row)
                .map_err(|e| Error::validation(format!("stored row {id} is invalid: {e}")))?,
        );
    }
    Ok(out)
}

/// Edge constructor used throughout the tests.
#[cfg(test)]
pub(crate) fn edge(
    src: (&str, EntityType),
    rel: RelationType,
    dst: (&str, EntityType),
    day: u32,
    start_t: u32,
    end_t: u32,
    evidence: &str,
) -> RelationEdge {
    RelationEdge::new(
        EntityRef::new(src.0, src.1).unwrap(),
        EntityRef::new(dst.0, dst.1).unwrap(),
        rel,
        TimeInterval::on_day(day, start_t, end_t).unwrap(),
        evidence,
    )
}

/// Convenience for building a [`DayTime`] in tests.
#[cfg(test)]
pub(crate) fn at(day: u32, t: u32) -> DayTime {
    DayTime::new(day, t).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use EntityType::*;
    use RelationType::*;

    #[test]
    fn insert_counts_and_dedup() {
        let store = GraphStore::open_in_memory().unwrap();
        let a = edge(("Jake", Person), Uses, ("phone", Object), 2, 100000, 100010, "");
        let b = edge(("Shure", Person), TalksTo, ("Alice", Person), 2, 155021, 155022, "Got it.");
        assert_eq!(store.insert_edges(&[a.clone(), b.clone()]).unwrap().inserted, 2);

        let fresh = GraphStore::open_in_memory().unwrap();
        let r = fresh.insert_edges(&[a.clone(), a.clone()]).unwrap();
        assert_eq!((r.inserted, r.duplicates), (1, 1));

        // Idempotent re-insert.
        let again = store.insert_edges(&[a, b]).unwrap();
        assert_eq!(again.inserted, 0);
        assert_eq!(store.stats().total_edges, 2);
    }

    #[test]
    fn evidence_keeps_near_duplicates_apart() {
        let store = GraphStore::open_in_memory().unwrap();
        let a = edge(("Jake", Person), Uses, ("phone", Object), 2, 100000, 100010, "a");
        let b = edge(("Jake", Person), Uses, ("phone", Object), 2, 100000, 100010, "b");
        assert_eq!(store.insert_edges(&[a, b]).unwrap().inserted, 2);
    }

    #[test]
    fn rejects_unknown_relation_and_commits_rest() {
        let store = GraphStore::open_in_memory().unwrap();
        let good: EdgeRow = edge(("Jake", Person), Uses, ("phone", Object), 2, 100000, 100010, "").into();
        let mut bad = good.clone();
        bad.rel_type = "LIKES".into();
        let mut backwards = good.clone();
        backwards.start_t = 120000;
        let r = store.insert_rows(&[bad, good, backwards]).unwrap();
        assert_eq!(r.inserted, 1);
        assert_eq!(r.rejected.len(), 2);
        assert_eq!(r.rejected[0].0, 0);
        assert!(r.rejected[0].1.contains("LIKES"));
        assert_eq!(r.rejected[1].0, 2);
    }

    #[test]
    fn query_examples() {
        let store = GraphStore::open_in_memory().unwrap();
        store
            .insert_edges(&[edge(("Jake", Person), Uses, ("phone", Object), 2, 100000, 100010, "")])
            .unwrap();
        let mut intent = GraphQueryIntent::new(at(6, 120000));
        intent.source_id = Some("jake".into());
        intent.rel = Some(Uses);
        assert_eq!(store.query(&intent).len(), 1);
        intent.query_time = at(1, 120000);
        assert!(store.query(&intent).is_empty());
    }

    #[test]
    fn persists_to_disk_with_schema_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.sqlite");
        {
            let store = GraphStore::open(&path).unwrap();
            store
                .insert_edges(&[edge(("Shure", Person), TalksTo, ("Alice", Person), 2, 155021, 155022, "Got it.")])
                .unwrap();
        }
        let conn = Connection::open(&path).unwrap();
        let mut stmt = conn.prepare("PRAGMA table_info(entity_graph_table)").unwrap();
        let cols: Vec<(String, String)> = stmt
            .query_map([], |r| Ok((r.get(1)?, r.get(2)?)))
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        let names: Vec<&str> = cols.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(
            names,
            ["id", "day", "start_t", "end_t", "transcript", "source_id", "source_type", "target_id", "target_type", "rel_type"]
        );
        assert_eq!(cols[1].1, "INTEGER");
        assert_eq!(cols[4].1, "TEXT");

        let reopened = GraphStore::open(&path).unwrap();
        let edges = reopened.edges();
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].row_id, 1);
        assert_eq!(edges[0].evidence, "Got it.");
    }

    #[test]
    fn jsonl_round_trip() {
        let store = GraphStore::open_in_memory().unwrap();
        store
            .insert_edges(&[
                edge(("Jake", Person), Uses, ("phone", Object), 2, 100000, 100010, ""),
                edge(("Lucia", Person), InteractsWith, ("yard", Location), 3, 90000, 90100, "outside"),
            ])
            .unwrap();
        let mut buf = Vec::new();
        assert_eq!(store.export_jsonl(&mut buf).unwrap(), 2);
        let first: serde_json::Value = serde_json::from_slice(buf.split(|b| *b == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["rel_type"], "USES");
        assert_eq!(first["source_type"], "Person");
        let other = GraphStore::open_in_memory().unwrap();
        assert_eq!(other.import_jsonl(&buf[..], "mem").unwrap().inserted, 2);
        assert_eq!(other.stats(), store.stats());
        let bad = b"{\"day\": 1}\n";
        match other.import_jsonl(&bad[..], "bad.jsonl") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stats_breakdowns() {
        let store = GraphStore::open_in_memory().unwrap();
        assert_eq!(store.stats(), GraphStats::default());
        store
            .insert_edges(&[
                edge(("Jake", Person), Uses, ("phone", Object), 1, 100000, 100010, ""),
                edge(("Jake", Person), TalksTo, ("Alice", Person), 1, 100000, 100010, ""),
                edge(("Alice", Person), Mentions, ("yard", Location), 2, 100000, 100010, ""),
            ])
            .unwrap();
        let s = store.stats();
        assert_eq!(s.total_edges, 3);
        assert_eq!(s.edges_per_day.values().sum::<usize>(), 3);
        assert_eq!(s.edges_per_day[&1], 2);
        assert_eq!(s.target_type_counts[&Person], 1);
    }
}
