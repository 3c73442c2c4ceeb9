use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{canonical_json, CallKind, ClientError, ClientRequest, ClientResponse, ModelClient, Usage};
use crate::error::Result;

/// One scripted response, matched by request hash or by routing key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub kind: CallKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub response: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

/// On-disk fixture script: either a bare array of entries or an object with
/// a `strict` flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub strict: bool,
    pub entries: Vec<ScriptEntry>,
}

impl ScriptFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)?;
        Ok(match v {
            Value::Array(_) => ScriptFile {
                strict: false,
                entries: serde_json::from_value(v)?,
            },
            other => serde_json::from_value(other)?,
        })
    }
}

/// Deterministic fixture-backed client.
///
/// Lookup order is `(kind, hash)` then `(kind, key)`. On a miss, strict mode
/// errors; otherwise a kind-specific deterministic default is produced (see
/// [`ScriptedClient::default_output`]). Read-only after construction apart
/// from per-kind call counters.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    by_hash: HashMap<(CallKind, String), ScriptEntry>,
    by_key: HashMap<(CallKind, String), ScriptEntry>,
    strict: bool,
    counts: [AtomicU64; 10],
}

impl ScriptedClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut client = Self::new();
        for p in paths {
            let file = ScriptFile::load(p)?;
            client.strict |= file.strict;
            client.extend(file.entries);
        }
        Ok(client)
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = ScriptEntry>) {
        for e in entries {
            self.push(e);
        }
    }

    pub fn push(&mut self, entry: ScriptEntry) {
        if let Some(h) = &entry.hash {
            self.by_hash.insert((entry.kind, h.clone()), entry.clone());
        }
        if let Some(k) = &entry.key {
            self.by_key.insert((entry.kind, k.clone()), entry);
        }
    }

    /// Convenience for tests: script `response` for `(kind, key)`.
    pub fn with(mut self, kind: CallKind, key: impl Into<String>, response: Value) -> Self {
        self.push(ScriptEntry {
            kind,
            hash: None,
            key: Some(key.into()),
            response,
            usage: None,
        });
        self
    }

    pub fn call_count(&self, kind: CallKind) -> u64 {
        self.counts[kind.index()].load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> u64 {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    fn lookup(&self, req: &ClientRequest) -> Option<&ScriptEntry> {
        self.by_hash
            .get(&(req.kind, req.hash()))
            .or_else(|| {
                req.key
                    .as_ref()
                    .and_then(|k| self.by_key.get(&(req.kind, k.clone())))
            })
    }

    /// Default outputs used outside strict mode:
    ///
    /// | kind | default |
    /// |---|---|
    /// | fuse | caption text followed by `speaker: text` of each utterance |
    /// | extract | no nodes, no relationships |
    /// | annotate | no citations (caption-interval fallback) |
    /// | embed_text | unit vector derived from SHA-256 of the text |
    /// | plan | one step per available tool, described by the question |
    /// | rewrite_visual | the task text as the single query |
    /// | transcript_llm_search | empty analysis |
    /// | analyze | cites the first three retrieved items |
    /// | grade | `incomplete` |
    /// | answer | empty text (caller falls back) |
    pub fn default_output(req: &ClientRequest) -> Value {
        let p = &req.payload;
        let s = |k: &str| p.get(k).and_then(Value::as_str).unwrap_or("").to_string();
        match req.kind {
            CallKind::Fuse => {
                let mut parts = vec![p
                    .pointer("/caption/text")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string()];
                for u in p.get("utterances").and_then(Value::as_array).into_iter().flatten() {
                    let text = u.get("text").and_then(Value::as_str).unwrap_or("");
                    match u.get("speaker").and_then(Value::as_str) {
                        Some(sp) => parts.push(format!("{sp}: {text}")),
                        None => parts.push(text.to_string()),
                    }
                }
                Value::String(parts.join(" ").trim().to_string())
            }
            CallKind::Extract => json!({"nodes": [], "relationships": []}),
            CallKind::Annotate => json!({"annotations": []}),
            CallKind::EmbedText => {
                let dim = p.get("dim").and_then(Value::as_u64).unwrap_or(8) as usize;
                Value::from(pseudo_embedding(&s("text"), dim))
            }
            CallKind::Plan => {
                let question = s("question");
                let tools: Vec<String> = p
                    .get("tools")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(|t| t.as_str().map(String::from)).collect())
                    .unwrap_or_else(|| vec!["eg".into(), "visual".into(), "audio".into()]);
                let longest = question
                    .split(|c: char| !c.is_alphanumeric())
                    .max_by_key(|w| w.chars().count())
                    .unwrap_or("")
                    .to_string();
                let steps: Vec<Value> = tools
                    .iter()
                    .map(|t| {
                        let args = match t.as_str() {
                            "eg" => json!({"evidence": longest}),
                            "visual" => json!({"queries": [question]}),
                            _ => json!({"task": question}),
                        };
                        json!({"description": question, "tool": t, "args": args})
                    })
                    .collect();
                json!({ "steps": steps })
            }
            CallKind::RewriteVisual => json!({"queries": [s("task")]}),
            CallKind::TranscriptLlmSearch => Value::String(String::new()),
            CallKind::Analyze => {
                let items = p.get("retrieved").and_then(Value::as_array).cloned().unwrap_or_default();
                let cited: Vec<&Value> = items.iter().take(3).collect();
                let timestamps: Vec<Value> = cited.iter().filter_map(|i| i.get("when").cloned()).collect();
                let edges: Vec<Value> = cited.iter().filter_map(|i| i.get("row_id").cloned()).collect();
                json!({
                    "summary": format!("{} item(s) retrieved for: {}", items.len(), s("task")),
                    "timestamps": timestamps,
                    "edges": edges,
                })
            }
            CallKind::Grade => Value::String("incomplete".into()),
            CallKind::Answer => Value::String(String::new()),
        }
    }
}

/// Deterministic unit-norm vector from the SHA-256 stream of `text`.
pub(crate) fn pseudo_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut raw = Vec::with_capacity(dim);
    let mut counter = 0u32;
    while raw.len() < dim {
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(counter.to_le_bytes());
        for chunk in h.finalize().chunks(4) {
            if raw.len() == dim {
                break;
            }
            let v = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            raw.push(v as f64 / u32::MAX as f64 - 0.5);
        }
        counter += 1;
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    raw.into_iter().map(|x| (x / norm) as f32).collect()
}

impl ModelClient for ScriptedClient {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        self.counts[req.kind.index()].fetch_add(1, Ordering::Relaxed);
        let (output, usage) = match self.lookup(req) {
            Some(entry) => (entry.response.clone(), entry.usage),
            None if self.strict => {
                return Err(ClientError::MissingFixture {
                    kind: req.kind,
                    hash: req.hash(),
                })
            }
            None => (Self::default_output(req), None),
        };
        let usage = usage.unwrap_or_else(|| {
            let completion = match &output {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            Usage::estimate(&canonical_json(&req.payload), &completion, req.image_count)
        });
        Ok(ClientResponse { output, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_request_same_response() {
        let c = ScriptedClient::new();
        let req = ClientRequest::new(CallKind::EmbedText, json!({"text": "people dancing", "dim": 16}));
        let a = c.call(&req).unwrap();
        let b = c.call(&req).unwrap();
        assert_eq!(a, b);
        let v: Vec<f64> = serde_json::from_value(a.output).unwrap();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(c.call_count(CallKind::EmbedText), 2);
    }

    #[test]
    fn strict_miss_names_hash() {
        let c = ScriptedClient::new().strict(true);
        let req = ClientRequest::new(CallKind::Plan, json!({"question": "q"}));
        match c.call(&req) {
            Err(ClientError::MissingFixture { kind, hash }) => {
                assert_eq!(kind, CallKind::Plan);
                assert_eq!(hash, req.hash());
                assert!(c.call(&req).unwrap_err().to_string().contains(&req.hash()));
            }
            other => panic!("expected missing fixture, got {other:?}"),
        }
    }

    #[test]
    fn hash_match_beats_key_match() {
        let req = ClientRequest::new(CallKind::Answer, json!({"q": 1})).with_key("q1");
        let mut c = ScriptedClient::new().with(CallKind::Answer, "q1", json!("B"));
        c.push(ScriptEntry {
            kind: CallKind::Answer,
            hash: Some(req.hash()),
            key: None,
            response: json!("C"),
            usage: Some(Usage {
                prompt_tokens: 10,
                completion_tokens: 1,
                image_count: 0,
                estimated: false,
            }),
        });
        let r = c.call(&req).unwrap();
        assert_eq!(r.text(), "C");
        assert_eq!(r.usage.prompt_tokens, 10);
        let other = ClientRequest::new(CallKind::Answer, json!({"q": 2})).with_key("q1");
        assert_eq!(c.call(&other).unwrap().text(), "B");
    }

    #[test]
    fn loads_both_file_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        std::fs::write(&a, r#"[{"kind":"grade","key":"q#1","response":"complete"}]"#).unwrap();
        let b = dir.path().join("b.json");
        std::fs::write(&b, r#"{"strict":true,"entries":[{"kind":"answer","key":"q","response":"D"}]}"#).unwrap();
        let c = ScriptedClient::from_files(&[a, b]).unwrap();
        let g = ClientRequest::new(CallKind::Grade, json!({})).with_key("q#1");
        assert_eq!(c.call(&g).unwrap().text(), "complete");
        let miss = ClientRequest::new(CallKind::Grade, json!({})).with_key("q#2");
        assert!(c.call(&miss).is_err());
    }
}
