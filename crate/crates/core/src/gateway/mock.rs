//! Scripted in-process stand-in for an OpenAI-compatible chat completions
//! server. Used by tests and by configs that declare a `mock` backend.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockReply {
    pub text: String,
    /// Defaults to the whitespace token count of `text`.
    #[serde(default)]
    pub completion_tokens: Option<u64>,
    /// Overrides the script-wide latency for this reply.
    #[serde(default)]
    pub latency_ms: Option<u64>,
}

impl MockReply {
    pub fn new(text: impl Into<String>) -> Self {
        MockReply {
            text: text.into(),
            completion_tokens: None,
            latency_ms: None,
        }
    }

    pub fn tokens(mut self, n: u64) -> Self {
        self.completion_tokens = Some(n);
        self
    }

    pub fn latency_ms(mut self, ms: u64) -> Self {
        self.latency_ms = Some(ms);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    /// Replies in call order, cycling when exhausted.
    #[serde(default)]
    pub replies: Vec<MockReply>,
    /// Checked first: the first key (in sorted order) contained in the user
    /// prompt selects the reply. Lets concurrent tests stay deterministic.
    #[serde(default)]
    pub by_prompt: BTreeMap<String, MockReply>,
    #[serde(default)]
    pub latency_ms: u64,
    /// 1-based call numbers answered with HTTP 500.
    #[serde(default)]
    pub fail_calls: Vec<usize>,
    #[serde(default)]
    pub fail_all: bool,
}

impl MockScript {
    pub fn always(text: impl Into<String>) -> Self {
        MockScript {
            replies: vec![MockReply::new(text)],
            ..Default::default()
        }
    }

    pub fn with_latency_ms(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }

    fn reply_for(&self, call: usize, prompt: &str) -> Option<&MockReply> {
        if let Some((_, r)) = self.by_prompt.iter().find(|(k, _)| prompt.contains(k.as_str())) {
            return Some(r);
        }
        if self.replies.is_empty() {
            return None;
        }
        Some(&self.replies[(call - 1) % self.replies.len()])
    }
}

struct MockState {
    script: MockScript,
    calls: AtomicUsize,
    requests: Mutex<Vec<Value>>,
}

/// A running mock. Dropping it stops the server.
pub struct MockHandle {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockHandle {
    pub async fn spawn(script: MockScript) -> std::io::Result<MockHandle> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            script,
            calls: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(complete))
            .with_state(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(MockHandle {
            addr,
            state,
            shutdown: Some(tx),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn calls(&self) -> usize {
        self.state.calls.load(Ordering::SeqCst)
    }

    /// Request bodies received so far, in arrival order.
    pub fn requests(&self) -> Vec<Value> {
        self.state.requests.lock().expect("mock lock").clone()
    }
}

impl Drop for MockHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn last_user_message(body: &Value) -> String {
    body["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string()
}

async fn complete(State(state): State<Arc<MockState>>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let call = state.calls.fetch_add(1, Ordering::SeqCst) + 1;
    let prompt = last_user_message(&body);
    state.requests.lock().expect("mock lock").push(body.clone());
    let script = &state.script;
    let reply = script.reply_for(call, &prompt);
    let latency = reply.and_then(|r| r.latency_ms).unwrap_or(script.latency_ms);
    tokio::time::sleep(Duration::from_millis(latency)).await;

    let failing = script.fail_all || script.fail_calls.contains(&call);
    let Some(reply) = reply.filter(|_| !failing) else {
        let err = json!({"error": {"message": format!("scripted failure on call {call}"), "type": "server_error"}});
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(err));
    };
    let tokens = reply
        .completion_tokens
        .unwrap_or_else(|| reply.text.split_whitespace().count() as u64);
    let prompt_tokens = prompt.split_whitespace().count() as u64;
    let body = json!({
        "id": format!("mock-{call}"),
        "object": "chat.completion",
        "model": body["model"],
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": reply.text},
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": tokens,
            "total_tokens": prompt_tokens + tokens
        }
    });
    (StatusCode::OK, Json(body))
}
