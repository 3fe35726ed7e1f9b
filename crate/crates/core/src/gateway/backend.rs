//! Client for OpenAI-compatible `/v1/chat/completions` endpoints.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::BackendConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("timed out after {0} s")]
    Timeout(f64),
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub output_tokens: u64,
    /// Seconds, measured around the whole request.
    pub latency: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    completion_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct BackendClient {
    pub config: BackendConfig,
    url: String,
    http: reqwest::Client,
    api_key: Option<String>,
}

impl BackendClient {
    /// The API key, if any, is read from the environment once, here.
    pub fn new(config: BackendConfig, http: reqwest::Client) -> Self {
        let api_key = config.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
        BackendClient {
            url: config.completions_url(),
            config,
            http,
            api_key,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub async fn complete(&self, prompt: &str) -> Result<Completion, BackendError> {
        let start = Instant::now();
        let limit = self.config.timeout;
        let (text, tokens) = tokio::time::timeout(Duration::from_secs_f64(limit), self.request(prompt))
            .await
            .map_err(|_| BackendError::Timeout(limit))??;
        Ok(Completion {
            output_tokens: tokens.unwrap_or_else(|| text.split_whitespace().count() as u64),
            text,
            latency: start.elapsed().as_secs_f64(),
        })
    }

    async fn request(&self, prompt: &str) -> Result<(String, Option<u64>), BackendError> {
        let body = ChatRequest {
            model: &self.config.model_id,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &self.config.preamble,
                },
                ChatMessage {
                    role: "user",
                    content: prompt,
                },
            ],
        };
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse = resp.json().await.map_err(|e| BackendError::Protocol(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("no choices with content".into()))?;
        Ok((text, parsed.usage.map(|u| u.completion_tokens)))
    }
}
