//! Live HTTP adapter for multimodal chat-completion endpoints.
//!
//! The image travels as base64 PNG inside a single user message. Two body
//! dialects are supported; everything else about the providers (auth
//! header, response shape) is mapped here and nowhere else.

use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendKind, ClientError, QueryRequest, QueryResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderStyle {
    /// `messages[].content[]` parts with `image_url` data URLs; answer at
    /// `choices[0].message.content`.
    OpenaiChat,
    /// `messages[].content[]` blocks with base64 `source`; answer is the
    /// concatenation of `content[]` text blocks.
    AnthropicMessages,
}

impl ProviderStyle {
    fn name(&self) -> &'static str {
        match self {
            ProviderStyle::OpenaiChat => "openai-chat",
            ProviderStyle::AnthropicMessages => "anthropic-messages",
        }
    }
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Full URL of the completion endpoint.
    pub endpoint: String,
    pub model: String,
    pub provider: ProviderStyle,
    /// Name of the environment variable holding the API key; the key
    /// itself never appears in config files or records.
    pub api_key_env: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, ClientError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| ClientError::MissingCredentials(config.api_key_env.clone()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transient(format!("http client construction: {e}")))?;
        Ok(Self {
            config,
            api_key,
            http,
        })
    }
}

fn build_body(
    provider: ProviderStyle,
    model: &str,
    max_tokens: u32,
    png_base64: &str,
    prompt: &str,
) -> Value {
    match provider {
        ProviderStyle::OpenaiChat => json!({
            "model": model,
            "max_tokens": max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url",
                     "image_url": {"url": format!("data:image/png;base64,{png_base64}")}},
                    {"type": "text", "text": prompt},
                ],
            }],
        }),
        ProviderStyle::AnthropicMessages => json!({
            "model": model,
            "max_tokens": max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image",
                     "source": {"type": "base64", "media_type": "image/png", "data": png_base64}},
                    {"type": "text", "text": prompt},
                ],
            }],
        }),
    }
}

fn extract_text(provider: ProviderStyle, body: &Value) -> Result<String, ClientError> {
    let malformed = |what: &str| ClientError::InvalidResponse(format!("missing {what} in response body"));
    match provider {
        ProviderStyle::OpenaiChat => body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| malformed("choices[0].message.content")),
        ProviderStyle::AnthropicMessages => {
            let blocks = body
                .pointer("/content")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("content array"))?;
            let text: String = blocks
                .iter()
                .filter(|b| b.pointer("/type").and_then(Value::as_str) == Some("text"))
                .filter_map(|b| b.pointer("/text").and_then(Value::as_str))
                .collect();
            if text.is_empty() {
                return Err(malformed("text content blocks"));
            }
            Ok(text)
        }
    }
}

fn classify_status(status: reqwest::StatusCode, body_snippet: &str) -> ClientError {
    let msg = format!("{status}: {}", body_snippet.chars().take(200).collect::<String>());
    if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
        ClientError::Auth(msg)
    } else if status == reqwest::StatusCode::REQUEST_TIMEOUT
        || status == reqwest::StatusCode::TOO_MANY_REQUESTS
        || status.is_server_error()
    {
        ClientError::Transient(msg)
    } else {
        ClientError::InvalidResponse(msg)
    }
}

impl Backend for LiveBackend {
    fn identity(&self) -> String {
        format!(
            "live-v1({}:{}@{})",
            self.config.provider.name(),
            self.config.model,
            self.config.endpoint
        )
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        let png = request
            .image
            .encode_png()
            .map_err(|e| ClientError::InvalidResponse(format!("image encoding: {e}")))?;
        let body = build_body(
            self.config.provider,
            &self.config.model,
            self.config.max_tokens,
            &BASE64.encode(png),
            request.prompt,
        );

        let started = Instant::now();
        let mut http_request = self
            .http
            .post(&self.config.endpoint)
            .header("content-type", "application/json");
        http_request = match self.config.provider {
            ProviderStyle::OpenaiChat => {
                http_request.header("authorization", format!("Bearer {}", self.api_key))
            }
            ProviderStyle::AnthropicMessages => http_request
                .header("x-api-key", &self.api_key)
                .header("anthropic-version", "2023-06-01"),
        };
        let response = http_request
            .json(&body)
            .send()
            .map_err(|e| ClientError::Transient(format!("request failed: {e}")))?;

        let status = response.status();
        let text = response
            .text()
            .map_err(|e| ClientError::Transient(format!("reading response body: {e}")))?;
        let latency_ms = started.elapsed().as_millis() as u64;

        if !status.is_success() {
            return Err(classify_status(status, &text));
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| ClientError::InvalidResponse(format!("response is not JSON: {e}")))?;
        Ok(QueryResponse {
            text: extract_text(self.config.provider, &parsed)?,
            latency_ms,
            from_cache: false,
        })
    }
}
