//! OpenAI-compatible chat-completion backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ProposalRequest, ProposerBackend, TransportError};
use crate::model::ImageRef;

pub const DEFAULT_API_KEY_ENV: &str = "TEXTOPT_API_KEY";

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout_ms() -> u64 {
    120_000
}

/// Non-secret connection settings. The key itself is read from the
/// environment variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    pub endpoint: String,
    pub model_name: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub multimodal: bool,
}

impl HttpChatConfig {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            api_key_env: default_api_key_env(),
            timeout_ms: default_timeout_ms(),
            multimodal: false,
        }
    }
}

pub struct HttpChatBackend {
    config: HttpChatConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatBackend")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, api_key, agent }
    }

    /// Reads the key from the configured environment variable.
    pub fn from_env(config: HttpChatConfig) -> Result<Self, String> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| format!("environment variable {} is not set", config.api_key_env))?;
        Ok(Self::new(config, key))
    }

    fn body(&self, prompt: &str, attachments: &[ImageRef]) -> Value {
        let content = if attachments.is_empty() {
            Value::String(prompt.to_string())
        } else {
            let mut parts = vec![json!({"type": "text", "text": prompt})];
            for img in attachments {
                match img.bytes() {
                    Ok(bytes) => {
                        use base64::Engine as _;
                        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                        parts.push(json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{data}", img.media_type)}
                        }));
                    }
                    Err(e) => log::warn!("skipping unreadable image attachment: {e}"),
                }
            }
            Value::Array(parts)
        };
        json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

/// First choice's message text from a chat-completion response body.
pub(crate) fn extract_content(body: &str) -> Result<String, TransportError> {
    let value: Value = serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| TransportError::Malformed("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(TransportError::Malformed(format!("unexpected content {other}"))),
    }
}

impl ProposerBackend for HttpChatBackend {
    fn supports_attachments(&self) -> bool {
        self.config.multimodal
    }

    fn complete(&mut self, request: &ProposalRequest<'_>) -> Result<String, TransportError> {
        let body = self.body(request.prompt, request.attachments).to_string();
        log::debug!("chat request: {} bytes to {}", body.len(), self.config.endpoint);
        let mut response = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(&body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => TransportError::Timeout,
                other => TransportError::Other(other.to_string()),
            })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Malformed(other.to_string()),
        })?;
        log::debug!("chat response: status {status}, {} bytes", text.len());
        if !(200..300).contains(&status) {
            return Err(TransportError::Status(status, text));
        }
        extract_content(&text)
    }
}
