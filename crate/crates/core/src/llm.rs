//! LLM completion clients: a remote HTTP backend and a deterministic
//! scripted client for tests and offline runs.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("llm transport error: {0}")]
    Transport(String),
    #[error("llm service returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("llm reply was not the required shape: {0}")]
    BadReply(String),
}

/// Text-in, text-out completion client.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// Sampling and transport settings for remote completion calls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmOptions {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default = "LlmOptions::default_timeout_secs")]
    pub timeout_secs: u64,
}

impl LlmOptions {
    fn default_timeout_secs() -> u64 {
        120
    }

    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        LlmOptions {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.95,
            top_p: 0.7,
            max_tokens: 8192,
            timeout_secs: Self::default_timeout_secs(),
        }
    }
}

/// HTTP client for a completion service.
///
/// Wire contract: POST `{"model", "prompt", "temperature", "top_p",
/// "max_tokens"}` to the endpoint, response `{"text": ...}`.
pub struct HttpLlmClient {
    options: LlmOptions,
    client: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(options: LlmOptions) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(options.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpLlmClient { options, client })
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        #[derive(Serialize)]
        struct Request<'a> {
            model: &'a str,
            prompt: &'a str,
            temperature: f64,
            top_p: f64,
            max_tokens: u32,
        }
        #[derive(Deserialize)]
        struct Response {
            text: String,
        }
        let response = self
            .client
            .post(&self.options.endpoint)
            .json(&Request {
                model: &self.options.model,
                prompt,
                temperature: self.options.temperature,
                top_p: self.options.top_p,
                max_tokens: self.options.max_tokens,
            })
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(LlmError::Status {
                status: status.as_u16(),
                body: response.text().unwrap_or_default(),
            });
        }
        let body: Response = response
            .json()
            .map_err(|e| LlmError::BadReply(e.to_string()))?;
        Ok(body.text)
    }
}

/// A reply step for the scripted client.
#[derive(Debug, Clone)]
pub enum ScriptedReply {
    Text(String),
    Fail(String),
}

struct ScriptEntry {
    matcher: String,
    replies: Mutex<VecDeque<ScriptedReply>>,
    last: ScriptedReply,
}

/// Deterministic prompt->reply table for tests and offline pipelines.
///
/// Matchers are checked in insertion order; the first whose substring
/// occurs in the prompt wins. Each matcher holds a reply queue whose
/// final entry repeats once the queue is drained.
#[derive(Default)]
pub struct ScriptedLlm {
    entries: Vec<ScriptEntry>,
    fallback: Option<String>,
}

impl ScriptedLlm {
    pub fn new() -> Self {
        ScriptedLlm::default()
    }

    /// Always reply `text` to prompts containing `matcher`.
    pub fn on(mut self, matcher: impl Into<String>, text: impl Into<String>) -> Self {
        let last = ScriptedReply::Text(text.into());
        self.entries.push(ScriptEntry {
            matcher: matcher.into(),
            replies: Mutex::new(VecDeque::new()),
            last,
        });
        self
    }

    /// Reply with a sequence; the final entry repeats on later calls.
    pub fn on_sequence(mut self, matcher: impl Into<String>, replies: Vec<ScriptedReply>) -> Self {
        assert!(!replies.is_empty(), "scripted sequence must be non-empty");
        let mut queue: VecDeque<ScriptedReply> = replies.into();
        let last = queue.back().cloned().expect("non-empty");
        queue.pop_back();
        self.entries.push(ScriptEntry {
            matcher: matcher.into(),
            replies: Mutex::new(queue),
            last,
        });
        self
    }

    /// Reply `text` to any prompt that matches no entry.
    pub fn fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    /// A client that fails every call with a transport error.
    pub fn always_failing(reason: impl Into<String>) -> Self {
        ScriptedLlm::new().on_sequence("", vec![ScriptedReply::Fail(reason.into())])
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        for entry in &self.entries {
            if prompt.contains(&entry.matcher) {
                let mut queue = entry.replies.lock().expect("scripted lock");
                let reply = queue.pop_front().unwrap_or_else(|| entry.last.clone());
                return match reply {
                    ScriptedReply::Text(t) => Ok(t),
                    ScriptedReply::Fail(reason) => Err(LlmError::Transport(reason)),
                };
            }
        }
        match &self.fallback {
            Some(t) => Ok(t.clone()),
            None => Err(LlmError::Transport(format!(
                "no scripted reply matches prompt of {} bytes",
                prompt.len()
            ))),
        }
    }
}

/// Extracts the JSON payload from an LLM reply: the first fenced code
/// block when present, otherwise the whole text. Returns `None` when the
/// remaining text cannot contain JSON.
pub(crate) fn json_payload(text: &str) -> Option<String> {
    let candidate = match text.find("```") {
        Some(start) => {
            let after = &text[start + 3..];
            let body_start = after
                .find(['{', '['])
                .filter(|&i| i <= 16 && !after[..i].contains("```"))?;
            let body = &after[body_start..];
            match body.find("```") {
                Some(end) => &body[..end],
                None => body,
            }
        }
        None => text,
    };
    let trimmed = candidate.trim();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        Some(trimmed.to_string())
    } else {
        None
    }
}
