//! Closed vocabularies and identifiers shared across the engine.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::DayTime;

/// Node type of an entity-graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    Person,
    Object,
    Location,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Person, EntityType::Object, EntityType::Location];

    pub fn as_str(&self) -> &'static str {
        match self {
            EntityType::Person => "Person",
            EntityType::Object => "Object",
            EntityType::Location => "Location",
        }
    }

    /// Lenient parse used on model output: case-insensitive, surrounding
    /// whitespace ignored.
    pub fn parse_lenient(s: &str) -> Result<Self> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::validation(format!("unknown entity type {s:?}")))
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown entity type {s:?}")))
    }
}

/// Edge label of an entity-graph relationship.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelationType {
    TalksTo,
    InteractsWith,
    Mentions,
    Uses,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::TalksTo,
        RelationType::InteractsWith,
        RelationType::Mentions,
        RelationType::Uses,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationType::TalksTo => "TALKS_TO",
            RelationType::InteractsWith => "INTERACTS_WITH",
            RelationType::Mentions => "MENTIONS",
            RelationType::Uses => "USES",
        }
    }

    /// Accepts `TALKS_TO`, `talks_to` and `talks-to`.
    pub fn parse_lenient(s: &str) -> Result<Self> {
        let t = s.trim().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(&t))
            .ok_or_else(|| Error::validation(format!("unknown relation type {s:?}")))
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown relation type {s:?}")))
    }
}

/// A named graph node. The id is stored verbatim; lookups compare
/// [`normalize_id`] forms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityRef {
    pub id: String,
    pub etype: EntityType,
}

impl EntityRef {
    pub fn new(id: impl Into<String>, etype: EntityType) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::validation("entity id is empty"));
        }
        Ok(Self { id, etype })
    }
}

/// Query-time form of an entity id: trimmed and lowercased.
pub fn normalize_id(id: &str) -> String {
    id.trim().to_lowercase()
}

/// The three retriever tools an agent sub-task can be routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tool {
    EntityGraph,
    Visual,
    Audio,
}

impl Tool {
    pub const ALL: [Tool; 3] = [Tool::EntityGraph, Tool::Visual, Tool::Audio];

    /// Handler id used by the router.
    pub fn handler_id(&self) -> &'static str {
        match self {
            Tool::EntityGraph => "eg",
            Tool::Visual => "visual",
            Tool::Audio => "audio",
        }
    }

    /// Accepts the handler ids and a few common spellings.
    pub fn parse_lenient(s: &str) -> Option<Tool> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "eg" | "entity_graph" | "entitygraph" | "graph" => Some(Tool::EntityGraph),
            "visual" | "vis" | "frames" | "f" => Some(Tool::Visual),
            "audio" | "transcript" | "transcripts" | "aud" | "t" => Some(Tool::Audio),
            _ => None,
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.handler_id())
    }
}

/// One analyzer output appended to working memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisNote {
    pub subtask_index: usize,
    pub tool: Tool,
    pub summary: String,
    pub cited_timestamps: Vec<DayTime>,
    pub cited_edges: Vec<i64>,
    pub retrieved_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
