//! Chat-completion clients: the injectable contract plus a live
//! OpenAI-compatible endpoint, a replay cache and closure-backed fakes.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the endpoint API key.
pub const API_KEY_ENV: &str = "DIALOGUE_KT_API_KEY";
/// Environment variable overriding the endpoint base URL.
pub const API_BASE_ENV: &str = "DIALOGUE_KT_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens: 2048,
            seed: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String, ClientError>;

    /// Model identifier, part of the annotation cache key.
    fn model_id(&self) -> &str;
}

/// Client backed by a closure; the scripted fake used in tests and dry runs.
pub struct FnClient<F> {
    model: String,
    respond: F,
    calls: AtomicUsize,
}

impl<F> FnClient<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, ClientError> + Send + Sync,
{
    pub fn new(model: impl Into<String>, respond: F) -> Self {
        FnClient {
            model: model.into(),
            respond,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, ClientError> + Send + Sync,
{
    fn complete(&self, messages: &[ChatMessage], _decoding: &Decoding) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(messages)
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

/// OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiClient {
    base_url: String,
    api_key: String,
    model: String,
    agent: ureq::Agent,
}

impl OpenAiClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(300)))
            .http_status_as_error(false)
            .build();
        OpenAiClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            model: model.into(),
            agent: config.into(),
        }
    }

    /// Reads the API key (and optional base URL) from the environment.
    pub fn from_env(model: impl Into<String>) -> Result<Self, ClientError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| ClientError::Transport(format!("environment variable {API_KEY_ENV} is not set")))?;
        let base = std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        Ok(Self::new(base, key, model))
    }

    pub fn request_body(&self, messages: &[ChatMessage], decoding: &Decoding) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        });
        if let Some(seed) = decoding.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    pub fn parse_response(value: &Value) -> Result<String, ClientError> {
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::BadResponse(format!("{:.200}", value.to_string())))
    }
}

impl ChatClient for OpenAiClient {
    fn complete(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String, ClientError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(self.request_body(messages, decoding))
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(ClientError::Status {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ClientError::BadResponse(e.to_string()))?;
        Self::parse_response(&value)
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

/// Replays recorded responses keyed by request content; on a miss it
/// forwards to the inner client (if any) and records the answer.
pub struct ReplayClient {
    dir: PathBuf,
    model: String,
    inner: Option<Box<dyn ChatClient>>,
}

impl ReplayClient {
    pub fn new(dir: impl Into<PathBuf>, model: impl Into<String>, inner: Option<Box<dyn ChatClient>>) -> Self {
        ReplayClient {
            dir: dir.into(),
            model: model.into(),
            inner,
        }
    }

    pub fn request_key(model: &str, messages: &[ChatMessage], decoding: &Decoding) -> String {
        let payload = json!({"model": model, "messages": messages, "decoding": decoding});
        hex::encode(Sha256::digest(payload.to_string().as_bytes()))
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String, ClientError> {
        let key = Self::request_key(&self.model, messages, decoding);
        let path = self.dir.join(format!("{key}.txt"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            return Ok(text);
        }
        let Some(inner) = &self.inner else {
            return Err(ClientError::Transport(format!("no recorded response for request {key}")));
        };
        let text = inner.complete(messages, decoding)?;
        crate::annotator::cache::atomic_write(&path, text.as_bytes()).map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(text)
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_body_shape() {
        let c = OpenAiClient::new("http://localhost:1/v1/", "k", "gpt-4o");
        let body = c.request_body(
            &[ChatMessage::system("s"), ChatMessage::user("u")],
            &Decoding {
                seed: Some(3),
                ..Default::default()
            },
        );
        assert_eq!(body["model"], "gpt-4o");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["seed"], 3);
        assert_eq!(c.base_url, "http://localhost:1/v1");
    }

    #[test]
    fn response_parsing() {
        let v = json!({"choices": [{"message": {"role": "assistant", "content": "hi"}}]});
        assert_eq!(OpenAiClient::parse_response(&v).unwrap(), "hi");
        assert!(OpenAiClient::parse_response(&json!({"error": "x"})).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let c = OpenAiClient::new("http://127.0.0.1:9/v1", "k", "m");
        let err = c.complete(&[ChatMessage::user("x")], &Decoding::default()).unwrap_err();
        assert!(matches!(err, ClientError::Transport(_)), "{err:?}");
    }

    #[test]
    fn replay_records_then_replays() {
        let dir = tempfile::tempdir().unwrap();
        let inner = FnClient::new("m", |_m: &[ChatMessage]| Ok("answer".to_string()));
        let c = ReplayClient::new(dir.path(), "m", Some(Box::new(inner)));
        let msgs = [ChatMessage::user("q")];
        assert_eq!(c.complete(&msgs, &Decoding::default()).unwrap(), "answer");
        let offline = ReplayClient::new(dir.path(), "m", None);
        assert_eq!(offline.complete(&msgs, &Decoding::default()).unwrap(), "answer");
        assert!(offline.complete(&[ChatMessage::user("other")], &Decoding::default()).is_err());
    }
}
