//! Strict-to-relaxed query schedule over the entity graph.
//!
//! | stage | predicate |
//! |---|---|
//! | A strict | every set field, ids exact |
//! | B relax time | A without the time range |
//! | C relax day | B without the day (query-day cap still applies) |
//! | D substring entities | C with each id reduced to its longest word, matched as a substring |
//! | E relax relation | D restricted to the target id alone (source id if no target), no relation or node types |
//!
//! Each stage's row set contains the previous stage's, so the first
//! non-empty stage is the most specific answer available.

use serde::{Deserialize, Serialize};

use super::intent::{GraphQueryIntent, IdMatch, StagePredicate};
use super::{GraphStore, RelationEdge};
use crate::error::Result;
use crate::model::normalize_id;

pub const DEFAULT_MAX_ROWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LadderStage {
    AStrict,
    BRelaxTime,
    CRelaxDay,
    DSubstringEntities,
    ERelaxRelType,
}

impl LadderStage {
    pub const ALL: [LadderStage; 5] = [
        LadderStage::AStrict,
        LadderStage::BRelaxTime,
        LadderStage::CRelaxDay,
        LadderStage::DSubstringEntities,
        LadderStage::ERelaxRelType,
    ];

    /// The predicate this stage evaluates for `intent`.
    pub fn predicate(&self, intent: &GraphQueryIntent) -> StagePredicate {
        let mut p = StagePredicate::strict(intent);
        if *self >= LadderStage::BRelaxTime {
            p.time_range = None;
        }
        if *self >= LadderStage::CRelaxDay {
            p.day = None;
        }
        if *self >= LadderStage::DSubstringEntities {
            p.source = intent.source_id.as_deref().map(substring_match);
            p.target = intent.target_id.as_deref().map(substring_match);
        }
        if *self == LadderStage::ERelaxRelType {
            p.rel = None;
            p.source_type = None;
            p.target_type = None;
            if p.target.is_some() {
                p.source = None;
            }
        }
        p
    }
}

/// The longest whitespace-delimited word of the normalized id (first on
/// ties), as a containment match.
fn substring_match(id: &str) -> IdMatch {
    let norm = normalize_id(id);
    let mut best = "";
    for word in norm.split_whitespace() {
        if word.chars().count() > best.chars().count() {
            best = word;
        }
    }
    IdMatch::Contains(best.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderResult {
    /// First stage that matched anything; `None` if every stage was empty.
    pub stage_used: Option<LadderStage>,
    pub rows: Vec<RelationEdge>,
    /// Rendered predicate of every stage evaluated, in order.
    pub queries_issued: Vec<String>,
}

pub fn run_ladder(store: &GraphStore, intent: &GraphQueryIntent, max_rows: usize) -> Result<LadderResult> {
    intent.validate()?;
    let max_rows = max_rows.max(1);
    let mut queries_issued = Vec::new();
    for stage in LadderStage::ALL {
        let predicate = stage.predicate(intent);
        queries_issued.push(predicate.render());
        let mut rows = store.select(&predicate);
        if !rows.is_empty() {
            rows.truncate(max_rows);
            return Ok(LadderResult {
                stage_used: Some(stage),
                rows,
                queries_issued,
            });
        }
    }
    Ok(LadderResult {
        stage_used: None,
        rows: Vec::new(),
        queries_issued,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{at, edge};
    use crate::model::{EntityType::*, RelationType::*};

    fn fixture() -> GraphStore {
        let store = GraphStore::open_in_memory().unwrap();
        store
            .insert_edges(&[
                edge(("Shure", Person), TalksTo, ("Alice", Person), 2, 155021, 155022, "Got it."),
                edge(("Jake", Person), Uses, ("phone", Object), 1, 90000, 90030, ""),
                edge(("Katrina", Person), InteractsWith, ("Katrina's luggage", Object), 3, 110000, 110030, "zipping the bag"),
            ])
            .unwrap();
        store
    }

    #[test]
    fn exact_row_hits_strict_stage() {
        let store = fixture();
        let mut i = GraphQueryIntent::new(at(6, 0));
        i.day = Some(2);
        i.time_range = Some((155000, 160700));
        i.source_id = Some("shure".into());
        i.rel = Some(TalksTo);
        let r = run_ladder(&store, &i, 50).unwrap();
        assert_eq!(r.stage_used, Some(LadderStage::AStrict));
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.queries_issued.len(), 1);
    }

    #[test]
    fn other_day_only_hits_relax_day() {
        let store = fixture();
        let mut i = GraphQueryIntent::new(at(6, 0));
        i.day = Some(4);
        i.time_range = Some((90000, 90100));
        i.source_id = Some("Jake".into());
        i.rel = Some(Uses);
        let r = run_ladder(&store, &i, 50).unwrap();
        assert_eq!(r.stage_used, Some(LadderStage::CRelaxDay));
        assert_eq!(r.queries_issued.len(), 3);
    }

    #[test]
    fn substring_then_relation_relaxation() {
        let store = fixture();
        let mut i = GraphQueryIntent::new(at(6, 0));
        i.target_id = Some("luggage".into());
        i.rel = Some(InteractsWith);
        assert_eq!(run_ladder(&store, &i, 50).unwrap().stage_used, Some(LadderStage::DSubstringEntities));
        i.rel = Some(Uses);
        let r = run_ladder(&store, &i, 50).unwrap();
        assert_eq!(r.stage_used, Some(LadderStage::ERelaxRelType));
        assert_eq!(r.rows[0].target.id, "Katrina's luggage");
        let last = r.queries_issued.last().unwrap();
        assert!(last.contains("target_id"));
        assert!(!last.contains("rel_type") && !last.contains("source_id"));
    }

    #[test]
    fn day_cap_applies_at_every_stage() {
        let store = fixture();
        let mut i = GraphQueryIntent::new(at(2, 0));
        i.target_id = Some("luggage".into());
        let r = run_ladder(&store, &i, 50).unwrap();
        assert_eq!(r.stage_used, None);
        assert!(r.rows.is_empty());
        assert_eq!(r.queries_issued.len(), 5);
    }

    #[test]
    fn truncates_and_validates() {
        let store = fixture();
        let mut i = GraphQueryIntent::new(at(6, 0));
        i.source_type = Some(Person);
        assert!(run_ladder(&store, &i, 50).is_err());
        i.evidence_substring = Some("".into());
        assert!(run_ladder(&store, &i, 50).is_err());
        i.evidence_substring = None;
        i.rel = Some(TalksTo);
        i.source_id = Some("Shure".into());
        assert_eq!(run_ladder(&store, &i, 1).unwrap().rows.len(), 1);
    }

    #[test]
    fn longest_word_rule() {
        assert_eq!(substring_match(" Katrina's  Luggage "), IdMatch::Contains("katrina's".into()));
        assert_eq!(substring_match("red cup"), IdMatch::Contains("red".into()));
        assert_eq!(substring_match("blue mug"), IdMatch::Contains("blue".into()));
    }
}
