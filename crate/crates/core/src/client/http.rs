//! OpenAI-compatible HTTP adapter.
//!
//! Chat kinds POST `{base_url}/chat/completions` with a system prompt from
//! [`PromptTemplates`] and the request payload as JSON in the user turn;
//! `embed_text` POSTs `{base_url}/embeddings`. Wrap in [`super::Retrying`]
//! for the retry policy.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};

use super::{parse_json_lenient, CallKind, ClientError, ClientRequest, ClientResponse, ModelClient, Usage};
use crate::error::Result;

const DEFAULT_TEMPLATES: [(CallKind, &str); 9] = [
    (CallKind::Fuse, include_str!("../../assets/prompts/fuse.txt")),
    (CallKind::Extract, include_str!("../../assets/prompts/extract.txt")),
    (CallKind::Annotate, include_str!("../../assets/prompts/annotate.txt")),
    (CallKind::Plan, include_str!("../../assets/prompts/plan.txt")),
    (CallKind::RewriteVisual, include_str!("../../assets/prompts/rewrite_visual.txt")),
    (
        CallKind::TranscriptLlmSearch,
        include_str!("../../assets/prompts/transcript_llm_search.txt"),
    ),
    (CallKind::Analyze, include_str!("../../assets/prompts/analyze.txt")),
    (CallKind::Grade, include_str!("../../assets/prompts/grade.txt")),
    (CallKind::Answer, include_str!("../../assets/prompts/answer.txt")),
];

/// System prompts per call kind. `{name}` placeholders are filled from
/// top-level string or array fields of the payload.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    templates: HashMap<CallKind, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES
                .iter()
                .map(|(k, t)| (*k, t.to_string()))
                .collect(),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates overridden by any `<kind>.txt` in `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut t = Self::default();
        for kind in CallKind::ALL {
            let path = dir.as_ref().join(format!("{}.txt", kind.as_str()));
            if path.exists() {
                t.templates.insert(kind, std::fs::read_to_string(path)?);
            }
        }
        Ok(t)
    }

    pub fn render(&self, kind: CallKind, payload: &Value) -> String {
        let mut text = self.templates.get(&kind).cloned().unwrap_or_default();
        if let Value::Object(map) = payload {
            for (k, v) in map {
                let placeholder = format!("{{{k}}}");
                if text.contains(&placeholder) {
                    let value = match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    text = text.replace(&placeholder, &value);
                }
            }
        }
        text
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            chat_model: "gpt-4.1".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct HttpClient {
    config: HttpConfig,
    templates: PromptTemplates,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(config: HttpConfig, templates: PromptTemplates) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self {
            config,
            templates,
            agent,
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let mut req = self.agent.post(&url).set("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(body.clone())
            .map_err(|e| ClientError::Transport(format!("{url}: {e}")))?;
        resp.into_json::<Value>()
            .map_err(|e| ClientError::Transport(format!("{url}: bad response body: {e}")))
    }

    fn structured(kind: CallKind) -> bool {
        matches!(
            kind,
            CallKind::Extract | CallKind::Annotate | CallKind::Plan | CallKind::RewriteVisual | CallKind::Analyze
        )
    }

    fn usage_from(body: &Value, prompt: &str, completion: &str, images: u64) -> Usage {
        match body.get("usage") {
            Some(u) if u.get("prompt_tokens").is_some() => Usage {
                prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
                completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
                image_count: images,
                estimated: false,
            },
            _ => Usage::estimate(prompt, completion, images),
        }
    }
}

impl ModelClient for HttpClient {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        if req.kind == CallKind::EmbedText {
            let text = req.payload.get("text").and_then(Value::as_str).unwrap_or("");
            let body = self.post(
                "embeddings",
                &json!({"model": self.config.embedding_model, "input": text}),
            )?;
            let embedding = body
                .pointer("/data/0/embedding")
                .cloned()
                .ok_or_else(|| ClientError::Transport("embedding response without data[0].embedding".into()))?;
            let usage = Self::usage_from(&body, text, "", 0);
            return Ok(ClientResponse {
                output: embedding,
                usage,
            });
        }

        let system = self.templates.render(req.kind, &req.payload);
        let user = serde_json::to_string_pretty(&req.payload).unwrap_or_default();
        let mut body = json!({
            "model": self.config.chat_model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        if Self::structured(req.kind) {
            body["response_format"] = json!({"type": "json_object"});
        }
        let resp = self.post("chat/completions", &body)?;
        let content = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::Transport("chat response without choices[0].message.content".into()))?
            .to_string();
        let usage = Self::usage_from(&resp, &format!("{system}\n{user}"), &content, req.image_count);
        let output = if Self::structured(req.kind) {
            parse_json_lenient(&content).unwrap_or(Value::String(content))
        } else {
            Value::String(content)
        };
        Ok(ClientResponse { output, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves the given bodies to successive connections, returning the
    /// request bodies it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn client(url: String) -> HttpClient {
        HttpClient::new(
            HttpConfig {
                base_url: url,
                ..HttpConfig::default()
            },
            PromptTemplates::default(),
        )
    }

    #[test]
    fn chat_kind_parses_json_and_usage() {
        let body = json!({
            "choices": [{"message": {"content": "{\"steps\": []}"}}],
            "usage": {"prompt_tokens": 120, "completion_tokens": 7}
        })
        .to_string();
        let (url, h) = serve(vec![(200, body)]);
        let req = ClientRequest::new(CallKind::Plan, json!({"question": "who?"}));
        let resp = client(url).call(&req).unwrap();
        assert_eq!(resp.output, json!({"steps": []}));
        assert_eq!(resp.usage.prompt_tokens, 120);
        assert!(!resp.usage.estimated);
        let sent: Value = serde_json::from_str(&h.join().unwrap()[0]).unwrap();
        assert_eq!(sent["temperature"], json!(0));
        assert_eq!(sent["response_format"]["type"], "json_object");
    }

    #[test]
    fn embeddings_and_estimated_usage() {
        let body = json!({"data": [{"embedding": [0.6, 0.8]}]}).to_string();
        let (url, h) = serve(vec![(200, body)]);
        let req = ClientRequest::new(CallKind::EmbedText, json!({"text": "knife", "dim": 2}));
        let resp = client(url).call(&req).unwrap();
        assert_eq!(resp.output, json!([0.6, 0.8]));
        assert!(resp.usage.estimated);
        h.join().unwrap();
    }

    #[test]
    fn server_error_is_transport_and_retried() {
        use crate::client::{RetryPolicy, Retrying};
        let ok = json!({"choices": [{"message": {"content": "B"}}]}).to_string();
        let (url, h) = serve(vec![(500, "{}".into()), (200, ok)]);
        let c = Retrying::new(
            client(url),
            RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
            },
        );
        let req = ClientRequest::new(CallKind::Answer, json!({"question": "q"}));
        assert_eq!(c.call(&req).unwrap().text(), "B");
        assert_eq!(h.join().unwrap().len(), 2);
    }

    #[test]
    fn templates_fill_placeholders() {
        let t = PromptTemplates::default();
        let s = t.render(
            CallKind::Extract,
            &json!({"allowed_nodes": ["Person"], "allowed_relationships": ["USES"]}),
        );
        assert!(s.contains("[\"Person\"]"));
        assert!(!s.contains("{allowed_nodes}"));
    }
}
