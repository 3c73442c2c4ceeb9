//! Question answering over multi-day egocentric recordings.
//!
//! The engine keeps three memories — a temporally annotated entity graph, a
//! frame-embedding index and a transcript index — and answers multiple-choice
//! questions with a planner/analyzer loop that talks to models only through
//! [`client::ModelClient`].

pub mod agent;
pub mod client;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod graph;
pub mod model;
pub mod stores;
pub mod time;
pub mod transcript;
pub mod visual;

pub use agent::{run, AgentConfig, AgentState, AnswerTrace, SubTask, TokenLedger, TranscriptVariant};
pub use client::{CallKind, ClientRequest, ClientResponse, ModelClient, ScriptedClient, Usage};
pub use error::{Error, Result};
pub use eval::{MCQItem, RecallConfig, Report};
pub use graph::{GraphQueryIntent, GraphStats, GraphStore, LadderResult, LadderStage, RelationEdge};
pub use model::{AnalysisNote, EntityRef, EntityType, RelationType, Tool};
pub use stores::Stores;
pub use time::{DayTime, TimeInterval};
pub use transcript::{LexicalHit, TranscriptStore, Utterance};
pub use visual::{FrameFilter, FrameHit, FrameRecord, VisualIndex};
