//! The single boundary between the engine and language/vision models.
//!
//! Every model call in the pipeline goes through [`ModelClient::call`] with a
//! [`ClientRequest`] tagged by [`CallKind`]. Implementations:
//!
//! - [`ScriptedClient`]: fixture-backed and fully deterministic.
//! - [`HttpClient`]: an OpenAI-compatible chat/embeddings adapter.
//! - [`RecordingClient`] / [`ReplayClient`]: cassette capture and playback.
//! - [`Retrying`]: bounded retries with exponential backoff on transport
//!   failures.

mod cassette;
mod http;
mod retry;
mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{CassetteEntry, RecordingClient, ReplayClient};
pub use http::{HttpClient, HttpConfig, PromptTemplates};
pub use retry::{RetryPolicy, Retrying};
pub use scripted::{ScriptEntry, ScriptFile, ScriptedClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Fuse,
    Extract,
    Annotate,
    EmbedText,
    Plan,
    RewriteVisual,
    TranscriptLlmSearch,
    Analyze,
    Grade,
    Answer,
}

impl CallKind {
    pub const ALL: [CallKind; 10] = [
        CallKind::Fuse,
        CallKind::Extract,
        CallKind::Annotate,
        CallKind::EmbedText,
        CallKind::Plan,
        CallKind::RewriteVisual,
        CallKind::TranscriptLlmSearch,
        CallKind::Analyze,
        CallKind::Grade,
        CallKind::Answer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CallKind::Fuse => "fuse",
            CallKind::Extract => "extract",
            CallKind::Annotate => "annotate",
            CallKind::EmbedText => "embed_text",
            CallKind::Plan => "plan",
            CallKind::RewriteVisual => "rewrite_visual",
            CallKind::TranscriptLlmSearch => "transcript_llm_search",
            CallKind::Analyze => "analyze",
            CallKind::Grade => "grade",
            CallKind::Answer => "answer",
        }
    }

    fn index(&self) -> usize {
        Self::ALL.iter().position(|k| k == self).unwrap_or(0)
    }
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub kind: CallKind,
    pub payload: Value,
    /// Human-readable routing key (document id, question id + step, query
    /// text). Scripted fixtures may be keyed by it; it is not part of the
    /// request hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    /// Number of images attached to the request.
    #[serde(default)]
    pub image_count: u64,
}

impl ClientRequest {
    pub fn new(kind: CallKind, payload: Value) -> Self {
        Self {
            kind,
            payload,
            key: None,
            image_count: 0,
        }
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn with_images(mut self, n: u64) -> Self {
        self.image_count = n;
        self
    }

    /// Stable hex SHA-256 of `(kind, canonical payload)`.
    pub fn hash(&self) -> String {
        request_hash(self.kind, &self.payload)
    }
}

pub fn request_hash(kind: CallKind, payload: &Value) -> String {
    let mut h = Sha256::new();
    h.update(b"egoqa-request/1\n");
    h.update(kind.as_str().as_bytes());
    h.update(b"\n");
    h.update(canonical_json(payload).as_bytes());
    hex::encode(h.finalize())
}

/// Canonical text form of a JSON value: object keys sorted, whitespace runs
/// inside strings collapsed to one space and trimmed.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null | Value::Bool(_) | Value::Number(_) => out.push_str(&v.to_string()),
        Value::String(s) => {
            let norm = s.split_whitespace().collect::<Vec<_>>().join(" ");
            out.push_str(&Value::String(norm).to_string());
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub image_count: u64,
    /// Set when the numbers come from the local heuristic rather than the
    /// backend.
    #[serde(default)]
    pub estimated: bool,
}

impl Usage {
    /// Whitespace-token count divided by four (rounded up), flagged as an
    /// estimate. Used when a backend reports no usage.
    pub fn estimate(prompt: &str, completion: &str, image_count: u64) -> Self {
        let quarter = |s: &str| (s.split_whitespace().count() as u64).div_ceil(4);
        Self {
            prompt_tokens: quarter(prompt),
            completion_tokens: quarter(completion),
            image_count,
            estimated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResponse {
    pub output: Value,
    pub usage: Usage,
}

impl ClientResponse {
    /// The output as text: strings verbatim, anything else as compact JSON.
    pub fn text(&self) -> String {
        match &self.output {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    /// The output as structured JSON: objects/arrays verbatim, strings parsed
    /// as JSON when possible (tolerating a fenced code block).
    pub fn json(&self) -> Option<Value> {
        match &self.output {
            Value::String(s) => parse_json_lenient(s),
            Value::Null => None,
            other => Some(other.clone()),
        }
    }
}

/// Parse JSON from model text, stripping a surrounding Markdown code fence.
pub fn parse_json_lenient(s: &str) -> Option<Value> {
    let t = s.trim();
    let t = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .and_then(|r| r.trim_end().strip_suffix("```"))
        .unwrap_or(t);
    serde_json::from_str(t.trim()).ok()
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no scripted fixture for {kind} request {hash}")]
    MissingFixture { kind: CallKind, hash: String },
    #[error("cassette has no recording for {kind} request {hash}")]
    ReplayMiss { kind: CallKind, hash: String },
    #[error("cassette error: {0}")]
    Cassette(String),
}

impl ClientError {
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::Transport(_))
    }
}

/// Any model backend. Implementations must tolerate concurrent calls.
pub trait ModelClient: Send + Sync {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError>;
}

impl<T: ModelClient + ?Sized> ModelClient for &T {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        (**self).call(req)
    }
}

impl<T: ModelClient + ?Sized> ModelClient for Arc<T> {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        (**self).call(req)
    }
}

impl<T: ModelClient + ?Sized> ModelClient for Box<T> {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        (**self).call(req)
    }
}
