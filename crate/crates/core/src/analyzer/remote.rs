//! Client for an OpenAI-compatible chat-completions endpoint.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{ChatRequest, ChatRole, JsonRequest, Module, Provider, Result};
use crate::error::AnalyzerError;

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_ANALYSIS_MODEL: &str = "gpt-4o-mini-2024-07-18";
pub const DEFAULT_CHAT_MODEL: &str = "gpt-4.1-2025-04-14";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: String,
    pub analysis_model: String,
    pub chat_model: String,
    pub timeout: Duration,
    /// Append-only JSONL log of every request and response.
    pub transcript: Option<PathBuf>,
    /// Replace message bodies in the transcript with their length.
    pub redact_transcript: bool,
}

impl RemoteConfig {
    pub fn new(api_key: impl Into<String>) -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            api_key: api_key.into(),
            analysis_model: DEFAULT_ANALYSIS_MODEL.to_string(),
            chat_model: DEFAULT_CHAT_MODEL.to_string(),
            timeout: Duration::from_secs(60),
            transcript: None,
            redact_transcript: false,
        }
    }

    /// Reads `CONTEXTY_API_KEY` (or `OPENAI_API_KEY`), `CONTEXTY_BASE_URL`,
    /// `CONTEXTY_ANALYSIS_MODEL`, `CONTEXTY_CHAT_MODEL`,
    /// `CONTEXTY_TRANSCRIPT` and `CONTEXTY_TRANSCRIPT_REDACT`.
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let key = get("CONTEXTY_API_KEY")
            .or_else(|| get("OPENAI_API_KEY"))
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| AnalyzerError::Unavailable("no API key in CONTEXTY_API_KEY or OPENAI_API_KEY".into()))?;
        let mut cfg = Self::new(key.trim());
        if let Some(v) = get("CONTEXTY_BASE_URL") {
            cfg.base_url = v.trim_end_matches('/').to_string();
        }
        if let Some(v) = get("CONTEXTY_ANALYSIS_MODEL") {
            cfg.analysis_model = v;
        }
        if let Some(v) = get("CONTEXTY_CHAT_MODEL") {
            cfg.chat_model = v;
        }
        cfg.transcript = get("CONTEXTY_TRANSCRIPT").map(PathBuf::from);
        cfg.redact_transcript = get("CONTEXTY_TRANSCRIPT_REDACT").is_some_and(|v| v == "1" || v.eq_ignore_ascii_case("true"));
        Ok(cfg)
    }
}

pub struct RemoteProvider {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    transcript_lock: Mutex<()>,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("base_url", &self.config.base_url)
            .field("analysis_model", &self.config.analysis_model)
            .field("chat_model", &self.config.chat_model)
            .finish()
    }
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

fn redact(body: &Value) -> Value {
    match body {
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| {
                    let v = match (k.as_str(), v) {
                        ("content" | "url" | "text", Value::String(s)) => json!(format!("[redacted {} chars]", s.chars().count())),
                        _ => redact(v),
                    };
                    (k.clone(), v)
                })
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(redact).collect()),
        other => other.clone(),
    }
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| AnalyzerError::Unavailable(format!("http client: {e}")))?;
        Ok(Self {
            config,
            client,
            transcript_lock: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn log(&self, module: Module, body: &Value, outcome: std::result::Result<&str, &AnalyzerError>) {
        let Some(path) = &self.config.transcript else { return };
        let (request, response) = match outcome {
            Ok(text) if self.config.redact_transcript => (redact(body), json!(format!("[redacted {} chars]", text.chars().count()))),
            Ok(text) => (body.clone(), json!(text)),
            Err(e) if self.config.redact_transcript => (redact(body), json!({ "error": e.to_string() })),
            Err(e) => (body.clone(), json!({ "error": e.to_string() })),
        };
        let line = json!({ "module": module.key(), "request": request, "response": response });
        let _guard = self.transcript_lock.lock().expect("transcript lock");
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = written {
            tracing::warn!(path = %path.display(), error = %e, "transcript write failed");
        }
    }

    fn post(&self, module: Module, body: Value) -> Result<String> {
        let url = format!("{}/chat/completions", self.config.base_url);
        let outcome = self.send(&url, &body);
        self.log(module, &body, outcome.as_deref());
        outcome
    }

    fn send(&self, url: &str, body: &Value) -> Result<String> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .map_err(|e| AnalyzerError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AnalyzerError::Transport(e.to_string()))?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(AnalyzerError::Unavailable(format!("provider rejected credentials ({status})")));
        }
        if !status.is_success() {
            return Err(AnalyzerError::Transport(format!("provider returned {status}")));
        }
        let parsed: Value = serde_json::from_str(&text).map_err(|e| AnalyzerError::Transport(format!("malformed response envelope: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| AnalyzerError::Transport("response has no message content".into()))
    }
}

impl Provider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn is_remote(&self) -> bool {
        true
    }

    fn complete_json(&self, request: &JsonRequest<'_>) -> Result<Value> {
        let input = request.input.to_string();
        let user_content = match request.image {
            Some(img) => {
                let data = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
                json!([
                    { "type": "text", "text": input },
                    { "type": "image_url", "image_url": { "url": format!("data:{};base64,{data}", img.mime) } }
                ])
            }
            None => json!(input),
        };
        let mut messages = vec![
            json!({ "role": "system", "content": request.system_prompt }),
            json!({ "role": "user", "content": user_content }),
        ];
        if let Some(note) = &request.repair {
            if !note.previous_output.is_empty() {
                messages.push(json!({ "role": "assistant", "content": note.previous_output }));
            }
            messages.push(json!({
                "role": "user",
                "content": format!("Your previous answer was rejected: {}. Reply again with ONLY valid JSON in the required format.", note.problem),
            }));
        }
        let body = json!({
            "model": self.config.analysis_model,
            "messages": messages,
            "temperature": 0,
            "response_format": { "type": "json_object" },
        });
        let text = self.post(request.module, body)?;
        serde_json::from_str(strip_fences(&text)).map_err(|e| AnalyzerError::Validation(format!("answer is not JSON: {e}")))
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let mut messages = vec![json!({ "role": "system", "content": request.system_prompt })];
        for turn in &request.history {
            let role = match turn.role {
                ChatRole::User => "user",
                ChatRole::Assistant => "assistant",
            };
            messages.push(json!({ "role": role, "content": turn.content }));
        }
        messages.push(json!({ "role": "user", "content": request.composed_message() }));
        let body = json!({ "model": self.config.chat_model, "messages": messages });
        self.post(Module::Chat, body)
    }
}
